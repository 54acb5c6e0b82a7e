//! Tree-structured graph-convolutional generator.
//!
//! A single latent vector is the root of a tree. Each layer first branches
//! every point into `d_l` children and then applies a graph convolution
//! whose neighbourhood is the child's chain of ancestors:
//!
//! ```text
//! p_i^{l+1} = σ( F_K(p_i^l) + Σ_{q_j ∈ A(p_i^l)} U_j q_j + b )
//! F_K(p)    = φ(p · loop_in) · loop_out
//! ```
//!
//! `F_K` lifts a point to `K` support copies of its feature width and
//! projects back down; `φ` and `σ` are leaky rectifiers except that the last
//! layer is linear so coordinates keep their sign.
//!
//! Points are laid out so that the children of parent `i` occupy rows
//! `i·d .. (i+1)·d`. With a batch of trees stacked row-wise the same rule
//! holds across the whole batch.

use bpcgen_tape::{Real, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{bind_all, join, uniform_init, LeafSource, ParamTree};
use crate::pointcloud::PointCloud;

/// Width of the latent root feature.
pub const LATENT_DIM: usize = 96;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branching {
    /// A learned map produces `d` distinct children per parent.
    Learned,
    /// Children are copies of their parent (ablation).
    Replicate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Output point count; must equal the product of `degrees`.
    pub points: usize,
    pub degrees: Vec<usize>,
    /// Feature width per layer: `degrees.len() + 1` entries from 96 to 3.
    pub widths: Vec<usize>,
    /// Support nodes `K` of the loop term.
    pub support_count: usize,
    pub leaky_slope: f64,
    pub branching: Branching,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            points: 2048,
            degrees: vec![1, 2, 2, 2, 2, 2, 64],
            widths: vec![96, 256, 256, 256, 128, 128, 128, 3],
            support_count: 10,
            leaky_slope: 0.2,
            branching: Branching::Learned,
        }
    }
}

impl GeneratorConfig {
    /// A config with the given degrees and widths and default
    /// hyperparameters; `points` is set to the degree product.
    pub fn with_layers(degrees: Vec<usize>, widths: Vec<usize>) -> Self {
        Self {
            points: degrees.iter().product(),
            degrees,
            widths,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.degrees.is_empty() || self.degrees.contains(&0) {
            return bad(format!("degrees must be non-empty and positive, got {:?}", self.degrees));
        }
        let product: usize = self.degrees.iter().product();
        if product != self.points {
            return bad(format!(
                "degrees {:?} produce {product} points but {} were configured",
                self.degrees, self.points
            ));
        }
        if self.widths.len() != self.degrees.len() + 1 {
            return bad(format!(
                "{} widths for {} layers; need one more width than degrees",
                self.widths.len(),
                self.degrees.len()
            ));
        }
        if self.widths[0] != LATENT_DIM || *self.widths.last().expect("non-empty") != 3 {
            return bad(format!(
                "widths must start at {LATENT_DIM} and end at 3, got {:?}",
                self.widths
            ));
        }
        if self.widths.contains(&0) || self.support_count == 0 {
            return bad("widths and support_count must be positive".into());
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky_slope must lie in (0, 1), got {}", self.leaky_slope));
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.degrees.len()
    }

    /// Point count at every layer, root included.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![1];
        for d in &self.degrees {
            counts.push(counts.last().expect("non-empty") * d);
        }
        counts
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layer_count() {
            Activation::Identity
        } else {
            Activation::Leaky(self.leaky_slope)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Leaky(f64),
    Identity,
}

impl Activation {
    fn apply<'t, T: Real>(self, x: Var<'t, T>) -> Var<'t, T> {
        match self {
            Activation::Leaky(s) => x.leaky_relu(T::lit(s)),
            Activation::Identity => x,
        }
    }
}

/// Parameters of one branch + graph-convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnLayerParams<P> {
    /// `[w_l, K·w_l]`
    pub loop_in: P,
    /// `[K·w_l, w_{l+1}]`
    pub loop_out: P,
    /// `U_j`, one `[w_j, w_{l+1}]` map per ancestor layer `j ≤ l`.
    pub ancestor_maps: Vec<P>,
    /// `[w_{l+1}]`
    pub bias: P,
    /// `[w_l, d_l·w_l]`; absent when branching replicates.
    pub branch_map: Option<P>,
}

impl<P> ParamTree<P> for GcnLayerParams<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(join(prefix, "loop_in"), &self.loop_in);
        f(join(prefix, "loop_out"), &self.loop_out);
        for (j, u) in self.ancestor_maps.iter().enumerate() {
            f(join(prefix, &format!("ancestor_{j}")), u);
        }
        f(join(prefix, "bias"), &self.bias);
        if let Some(b) = &self.branch_map {
            f(join(prefix, "branch_map"), b);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        f(join(prefix, "loop_in"), &mut self.loop_in);
        f(join(prefix, "loop_out"), &mut self.loop_out);
        for (j, u) in self.ancestor_maps.iter_mut().enumerate() {
            f(join(prefix, &format!("ancestor_{j}")), u);
        }
        f(join(prefix, "bias"), &mut self.bias);
        if let Some(b) = &mut self.branch_map {
            f(join(prefix, "branch_map"), b);
        }
    }
}

impl<P> GcnLayerParams<P> {
    fn rebuild<Q, I: Iterator<Item = Q>>(&self, src: &mut LeafSource<I>) -> GcnLayerParams<Q> {
        GcnLayerParams {
            loop_in: src.take(),
            loop_out: src.take(),
            ancestor_maps: self.ancestor_maps.iter().map(|_| src.take()).collect(),
            bias: src.take(),
            branch_map: self.branch_map.as_ref().map(|_| src.take()),
        }
    }
}

impl<T: Real> GcnLayerParams<Tensor<T>> {
    fn shapes(config: &GeneratorConfig, layer: usize) -> Vec<(&'static str, Vec<usize>)> {
        let (w, w_next, k) = (config.widths[layer], config.widths[layer + 1], config.support_count);
        let mut s = vec![("loop_in", vec![w, k * w]), ("loop_out", vec![k * w, w_next])];
        for j in 0..=layer {
            s.push(("ancestor", vec![config.widths[j], w_next]));
        }
        s.push(("bias", vec![w_next]));
        if config.branching == Branching::Learned {
            s.push(("branch_map", vec![w, config.degrees[layer] * w]));
        }
        s
    }

    fn init(config: &GeneratorConfig, layer: usize, rng: &mut impl Rng) -> Self {
        let (w, w_next, k) = (config.widths[layer], config.widths[layer + 1], config.support_count);
        Self {
            loop_in: uniform_init(w, k * w, rng),
            loop_out: uniform_init(k * w, w_next, rng),
            ancestor_maps: (0..=layer)
                .map(|j| uniform_init(config.widths[j], w_next, rng))
                .collect(),
            bias: Tensor::zeros([w_next]),
            branch_map: (config.branching == Branching::Learned)
                .then(|| uniform_init(w, config.degrees[layer] * w, rng)),
        }
    }
}

/// All generator parameters, one entry per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams<P> {
    pub layers: Vec<GcnLayerParams<P>>,
}

impl<P> ParamTree<P> for GeneratorParams<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("layer{l}")), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("layer{l}")), f);
        }
    }
}

impl<P> GeneratorParams<P> {
    pub(crate) fn rebuild<Q, I: Iterator<Item = Q>>(&self, src: &mut LeafSource<I>) -> GeneratorParams<Q> {
        GeneratorParams {
            layers: self.layers.iter().map(|l| l.rebuild(src)).collect(),
        }
    }
}

impl<T: Real> GeneratorParams<Tensor<T>> {
    /// Uniform `±1/√fan_in` weights, zero biases.
    pub fn init(config: &GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            layers: (0..config.layer_count())
                .map(|l| GcnLayerParams::init(config, l, rng))
                .collect(),
        })
    }

    pub fn check_shapes(&self, config: &GeneratorConfig) -> Result<()> {
        if self.layers.len() != config.layer_count() {
            return Err(Error::Config(format!(
                "{} parameter layers for {} configured layers",
                self.layers.len(),
                config.layer_count()
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let want = GcnLayerParams::<Tensor<T>>::shapes(config, l);
            let have: Vec<(String, Vec<usize>)> = layer
                .named("")
                .into_iter()
                .map(|(n, t)| (n, t.shape().to_vec()))
                .collect();
            let matches = want.len() == have.len()
                && want.iter().zip(&have).all(|((_, w), (_, h))| w == h);
            if !matches {
                return Err(Error::Config(format!(
                    "layer {l} parameter shapes {have:?} do not match config {want:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> GeneratorParams<Var<'t, T>> {
        self.rebuild(&mut LeafSource(bind_all(tape, self, trainable).into_iter()))
    }
}

/// Point features of one tree at one layer: `[M_l, w_l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<T> {
    pub features: Tensor<T>,
    pub layer_index: usize,
}

/// Ancestor chains of the points at the current (just branched) level.
///
/// `levels[j][i]` is the row, within layer `j`, of point `i`'s ancestor at
/// that layer. After branching layer `l` there are `l + 1` levels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeTopology {
    levels: Vec<Vec<usize>>,
    current: usize,
}

impl TreeTopology {
    /// The lone root, which has no ancestors.
    pub fn root() -> Self {
        Self {
            levels: Vec::new(),
            current: 1,
        }
    }

    pub fn point_count(&self) -> usize {
        self.current
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Ancestor rows of point `i`, root first.
    pub fn ancestors_of(&self, i: usize) -> Vec<usize> {
        self.levels.iter().map(|lvl| lvl[i]).collect()
    }

    /// Topology after every current point branches into `degree` children.
    pub fn branched(&self, degree: usize) -> Self {
        let n = self.current * degree;
        let mut levels: Vec<Vec<usize>> = self
            .levels
            .iter()
            .map(|lvl| (0..n).map(|c| lvl[c / degree]).collect())
            .collect();
        levels.push((0..n).map(|c| c / degree).collect());
        Self { levels, current: n }
    }

    /// Level tables for `batch` trees stacked row-wise, given the point
    /// count of every ancestor layer.
    fn batched(&self, batch: usize, counts: &[usize]) -> Vec<Vec<usize>> {
        self.levels
            .iter()
            .enumerate()
            .map(|(j, lvl)| {
                (0..batch)
                    .flat_map(|b| lvl.iter().map(move |&i| b * counts[j] + i))
                    .collect()
            })
            .collect()
    }
}

fn branch_var<'t, T: Real>(features: Var<'t, T>, branch_map: Option<Var<'t, T>>, degree: usize) -> Var<'t, T> {
    let shape = features.shape();
    let (rows, width) = (shape[0], shape[1]);
    match branch_map {
        Some(map) => features.matmul(map).reshape([rows * degree, width]),
        None => features.gather_rows((0..rows * degree).map(|c| c / degree).collect()),
    }
}

fn gcn_var<'t, T: Real>(
    child: Var<'t, T>,
    history: &[Var<'t, T>],
    tables: &[Vec<usize>],
    params: &GcnLayerParams<Var<'t, T>>,
    slope: f64,
    activation: Activation,
) -> Var<'t, T> {
    let slope = T::lit(slope);
    let mut pre = child
        .matmul(params.loop_in)
        .leaky_relu(slope)
        .matmul(params.loop_out);
    for ((q, u), idx) in history.iter().zip(&params.ancestor_maps).zip(tables) {
        // U_j is applied at the ancestor layer and then broadcast down the
        // tree, which equals gathering first and mapping each child.
        pre = pre + q.matmul(*u).gather_rows(idx.clone());
    }
    activation.apply(pre.add_row(params.bias))
}

fn check_finite<T: Real>(v: &Var<'_, T>, stage: &'static str, layer: usize) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { stage, layer })
    }
}

/// Branches every point of `state` into `degree` children.
pub fn branch<T: Real>(
    state: &LayerState<T>,
    topology: &TreeTopology,
    params: &GcnLayerParams<Tensor<T>>,
    degree: usize,
) -> Result<(LayerState<T>, TreeTopology)> {
    let (rows, width) = (state.features.rows(), state.features.cols());
    if rows != topology.point_count() {
        return Err(Error::Config(format!(
            "state has {rows} points but topology has {}",
            topology.point_count()
        )));
    }
    if let Some(map) = &params.branch_map {
        if map.shape() != [width, degree * width] {
            return Err(Error::Config(format!(
                "branch map shape {:?} does not match width {width} and degree {degree}",
                map.shape()
            )));
        }
    }
    let tape = Tape::new();
    let x = tape.constant(state.features.clone());
    let map = params.branch_map.as_ref().map(|m| tape.constant(m.clone()));
    let out = branch_var(x, map, degree);
    Ok((
        LayerState {
            features: (*out.value()).clone(),
            layer_index: state.layer_index,
        },
        topology.branched(degree),
    ))
}

/// One graph convolution over branched points.
///
/// `history` holds the states of layers `0..=l` (the ancestors) and
/// `topology` the ancestor chains of the rows of `state`.
pub fn gcn_block<T: Real>(
    state: &LayerState<T>,
    history: &[LayerState<T>],
    topology: &TreeTopology,
    params: &GcnLayerParams<Tensor<T>>,
    slope: f64,
    activation: Activation,
) -> Result<LayerState<T>> {
    if state.features.rows() != topology.point_count() {
        return Err(Error::Config("state and topology disagree on point count".into()));
    }
    if params.ancestor_maps.len() != topology.depth() || history.len() != topology.depth() {
        return Err(Error::Config(format!(
            "{} ancestor maps and {} ancestor states for {} ancestor levels",
            params.ancestor_maps.len(),
            history.len(),
            topology.depth()
        )));
    }
    for (j, (h, u)) in history.iter().zip(&params.ancestor_maps).enumerate() {
        if u.rows() != h.features.cols() {
            return Err(Error::Config(format!("ancestor map {j} does not match layer width")));
        }
    }
    let tape = Tape::new();
    let bound = params.rebuild(&mut LeafSource(
        params.leaves().into_iter().map(|t| tape.constant(t.clone())),
    ));
    let hist: Vec<Var<'_, T>> = history.iter().map(|h| tape.constant(h.features.clone())).collect();
    let counts: Vec<usize> = history.iter().map(|h| h.features.rows()).collect();
    let out = gcn_var(
        tape.constant(state.features.clone()),
        &hist,
        &topology.batched(1, &counts),
        &bound,
        slope,
        activation,
    );
    check_finite(&out, "generator", state.layer_index)?;
    Ok(LayerState {
        features: (*out.value()).clone(),
        layer_index: state.layer_index + 1,
    })
}

/// A validated generator configuration with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeGenerator<T> {
    config: GeneratorConfig,
    pub params: GeneratorParams<Tensor<T>>,
}

impl<T: Real> TreeGenerator<T> {
    pub fn new(config: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        let params = GeneratorParams::init(&config, rng)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: GeneratorConfig, params: GeneratorParams<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Grows `batch` trees from the rows of `z` (`[B, 96]`), returning the
    /// stacked clouds as `[B·N, 3]`.
    pub fn forward<'t>(
        &self,
        params: &GeneratorParams<Var<'t, T>>,
        z: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let shape = z.shape();
        if shape.len() != 2 || shape[1] != LATENT_DIM {
            return Err(Error::InvalidInput(format!("latent batch must be [B, {LATENT_DIM}], got {shape:?}")));
        }
        let batch = shape[0];
        check_finite(&z, "generator", 0)?;
        let counts = self.config.counts();
        let mut topology = TreeTopology::root();
        let mut history = vec![z];
        for (l, layer) in params.layers.iter().enumerate() {
            let degree = self.config.degrees[l];
            let child = branch_var(*history.last().expect("root"), layer.branch_map, degree);
            topology = topology.branched(degree);
            let tables = topology.batched(batch, &counts);
            let next = gcn_var(
                child,
                &history,
                &tables,
                layer,
                self.config.leaky_slope,
                self.config.activation(l),
            );
            check_finite(&next, "generator", l + 1)?;
            history.push(next);
        }
        Ok(*history.last().expect("at least one layer"))
    }

    /// Deterministic point cloud for one latent vector.
    pub fn generate(&self, z: &[f64]) -> Result<PointCloud> {
        if z.len() != LATENT_DIM {
            return Err(Error::InvalidInput(format!("latent code has {} entries, need {LATENT_DIM}", z.len())));
        }
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let zt = tape.constant(Tensor::from_vec([1, LATENT_DIM], z.iter().map(|&v| T::lit(v)).collect()));
        let out = self.forward(&bound, zt)?;
        let flat: Vec<f64> = out.value().data().iter().map(|v| v.to_f64().expect("finite")).collect();
        PointCloud::from_flat(&flat)
    }
}

/// Grows the point cloud for latent `z` under `config` and `params`.
pub fn generate<T: Real>(z: &[f64], config: &GeneratorConfig, params: &GeneratorParams<Tensor<T>>) -> Result<PointCloud> {
    TreeGenerator::from_params(config.clone(), params.clone())?.generate(z)
}
