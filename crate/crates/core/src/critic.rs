//! Point-cloud critic and the Wasserstein gradient penalty.

use bpcgen_tape::{Real, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{bind_all, join, Affine, LeafSource, ParamTree};
use crate::pointcloud::PointCloud;

/// A differentiable scalar score per cloud.
///
/// Clouds are passed stacked as `[B·N, 3]`; the result is `[B, 1]`.
pub trait Critic<T: Real>: ParamTree<Tensor<T>> {
    type Bound<'t>
    where
        T: 't;

    fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Self::Bound<'t>;

    /// Bound parameters in traversal order.
    fn bound_vars<'t>(bound: &Self::Bound<'t>) -> Vec<Var<'t, T>>;

    fn forward<'t>(&self, bound: &Self::Bound<'t>, clouds: Var<'t, T>, points: usize) -> Var<'t, T>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticConfig {
    /// Shared per-point map, starting at 3.
    pub point_widths: Vec<usize>,
    /// Head after pooling, from the last point width down to 1.
    pub head_widths: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            point_widths: vec![3, 64, 128, 256, 512],
            head_widths: vec![512, 128, 64, 1],
            leaky_slope: 0.2,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        let pw = &self.point_widths;
        let hw = &self.head_widths;
        if pw.len() < 2 || pw[0] != 3 {
            return Err(Error::Config(format!("critic point widths must start at 3, got {pw:?}")));
        }
        if hw.len() < 2 || hw[0] != *pw.last().expect("non-empty") || *hw.last().expect("non-empty") != 1 {
            return Err(Error::Config(format!(
                "critic head widths must run from {} to 1, got {hw:?}",
                pw.last().expect("non-empty")
            )));
        }
        if pw.iter().chain(hw).any(|&w| w == 0) {
            return Err(Error::Config("critic widths must be positive".into()));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config("critic leaky_slope must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticParams<P> {
    pub point_layers: Vec<Affine<P>>,
    pub head_layers: Vec<Affine<P>>,
}

impl<P> ParamTree<P> for CriticParams<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        for (i, l) in self.point_layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("point{i}")), f);
        }
        for (i, l) in self.head_layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("head{i}")), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        for (i, l) in self.point_layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("point{i}")), f);
        }
        for (i, l) in self.head_layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("head{i}")), f);
        }
    }
}

impl<P> CriticParams<P> {
    fn rebuild<Q, I: Iterator<Item = Q>>(&self, src: &mut LeafSource<I>) -> CriticParams<Q> {
        CriticParams {
            point_layers: self.point_layers.iter().map(|l| l.rebuild(src)).collect(),
            head_layers: self.head_layers.iter().map(|l| l.rebuild(src)).collect(),
        }
    }
}

/// Shared per-point affine layers with leaky rectification, max pooling
/// over points, then an affine head.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCritic<T> {
    config: CriticConfig,
    pub params: CriticParams<Tensor<T>>,
}

impl<T: Real> PointCritic<T> {
    pub fn new(config: CriticConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut layers = |w: &[usize]| -> Vec<Affine<Tensor<T>>> {
            w.windows(2).map(|p| Affine::init(p[0], p[1], rng)).collect()
        };
        let params = CriticParams {
            point_layers: layers(&config.point_widths),
            head_layers: layers(&config.head_widths),
        };
        Ok(Self { config, params })
    }

    pub fn from_params(config: CriticConfig, params: CriticParams<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let expect = |w: &[usize], ls: &[Affine<Tensor<T>>]| {
            ls.len() + 1 == w.len()
                && ls
                    .iter()
                    .zip(w.windows(2))
                    .all(|(l, p)| l.weight.shape() == [p[0], p[1]] && l.bias.shape() == [p[1]])
        };
        if !expect(&config.point_widths, &params.point_layers) || !expect(&config.head_widths, &params.head_layers) {
            return Err(Error::Config("critic parameter shapes do not match config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }
}

impl<T: Real> ParamTree<Tensor<T>> for PointCritic<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.params.visit(prefix, f)
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        self.params.visit_mut(prefix, f)
    }
}

impl<T: Real> Critic<T> for PointCritic<T> {
    type Bound<'t> = CriticParams<Var<'t, T>> where T: 't;

    fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Self::Bound<'t> {
        self.params
            .rebuild(&mut LeafSource(bind_all(tape, &self.params, trainable).into_iter()))
    }

    fn bound_vars<'t>(bound: &Self::Bound<'t>) -> Vec<Var<'t, T>> {
        bound.leaves().into_iter().copied().collect()
    }

    fn forward<'t>(&self, bound: &Self::Bound<'t>, clouds: Var<'t, T>, points: usize) -> Var<'t, T> {
        let slope = T::lit(self.config.leaky_slope);
        let mut x = clouds;
        for layer in &bound.point_layers {
            x = layer.apply(x).leaky_relu(slope);
        }
        x = x.block_max_rows(points);
        let last = bound.head_layers.len() - 1;
        for (i, layer) in bound.head_layers.iter().enumerate() {
            x = layer.apply(x);
            if i < last {
                x = x.leaky_relu(slope);
            }
        }
        x
    }
}

/// `D(x) = ⟨w, x⟩ + c` over flattened coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearCritic<T> {
    /// `[N, 3]`
    pub w: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Real> LinearCritic<T> {
    pub fn new(w: Tensor<T>, c: T) -> Self {
        Self {
            w,
            c: Tensor::from_vec([1], vec![c]),
        }
    }
}

impl<T: Real> ParamTree<Tensor<T>> for LinearCritic<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "w"), &self.w);
        f(join(prefix, "c"), &self.c);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        f(join(prefix, "w"), &mut self.w);
        f(join(prefix, "c"), &mut self.c);
    }
}

impl<T: Real> Critic<T> for LinearCritic<T> {
    type Bound<'t> = (Var<'t, T>, Var<'t, T>) where T: 't;

    fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Self::Bound<'t> {
        (tape.leaf(self.w.clone(), trainable), tape.leaf(self.c.clone(), trainable))
    }

    fn bound_vars<'t>(bound: &Self::Bound<'t>) -> Vec<Var<'t, T>> {
        vec![bound.0, bound.1]
    }

    fn forward<'t>(&self, bound: &Self::Bound<'t>, clouds: Var<'t, T>, points: usize) -> Var<'t, T> {
        let batch = clouds.shape()[0] / points;
        clouds
            .reshape([batch, 3 * points])
            .matmul(bound.0.reshape([3 * points, 1]))
            .add_row(bound.1)
    }
}

/// Stacks clouds of equal size into `[B·N, 3]`.
pub fn stack_clouds<T: Real>(clouds: &[&PointCloud]) -> Result<Tensor<T>> {
    let n = clouds.first().map(|c| c.len()).unwrap_or(0);
    if n == 0 || clouds.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidInput("clouds must be non-empty and of equal size".into()));
    }
    let data = clouds
        .iter()
        .flat_map(|c| c.flat())
        .map(T::lit)
        .collect();
    Ok(Tensor::from_vec([clouds.len() * n, 3], data))
}

/// Interpolates `u_b · real + (1 − u_b) · fake` per cloud.
pub fn interpolate<T: Real>(real: &Tensor<T>, fake: &Tensor<T>, u: &[T]) -> Tensor<T> {
    let per = real.rows() / u.len();
    let mut out = real.clone();
    for (r, (o, f)) in out.data_mut().chunks_mut(3).zip(fake.data().chunks(3)).enumerate() {
        let ub = u[r / per];
        for (a, b) in o.iter_mut().zip(f) {
            *a = ub * *a + (T::one() - ub) * *b;
        }
    }
    out
}

/// Batch mean of `(‖∇_{x̂} D(x̂)‖₂ − 1)²` with the norm over all `3N`
/// coordinates of each interpolate. Differentiable in the critic
/// parameters.
pub fn gradient_penalty_var<'t, T: Real, C: Critic<T>>(
    critic: &C,
    bound: &C::Bound<'t>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    u: &[T],
    points: usize,
) -> Var<'t, T> {
    let tape = C::bound_vars(bound)[0].tape();
    let batch = u.len();
    let x_hat = tape.variable(interpolate(real, fake, u));
    // Samples are independent, so the gradient of the summed score holds
    // every per-sample gradient.
    let total = critic.forward(bound, x_hat, points).sum();
    let g = tape.grad(total, &[x_hat], true)[0];
    let norms = g
        .reshape([batch, 3 * points])
        .square()
        .matmul(tape.constant(Tensor::ones([3 * points, 1])))
        .sqrt();
    norms.add_scalar(-T::one()).square().mean()
}

pub fn critic_score<T: Real, C: Critic<T>>(critic: &C, pc: &PointCloud) -> Result<f64> {
    let tape = Tape::new();
    let bound = critic.bind(&tape, false);
    let x = tape.constant(stack_clouds::<T>(&[pc])?);
    let v = critic.forward(&bound, x, pc.len()).value().item();
    let v = v.to_f64().unwrap_or(f64::NAN);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { stage: "critic", layer: 0 })
    }
}

/// `(‖∇D(x̂)‖ − 1)²` for one pair with `x̂ = u·real + (1 − u)·fake`.
pub fn gradient_penalty<T: Real, C: Critic<T>>(
    critic: &C,
    real: &PointCloud,
    fake: &PointCloud,
    u: f64,
) -> Result<f64> {
    if real.len() != fake.len() {
        return Err(Error::InvalidInput(format!(
            "penalty needs equal counts, got {} and {}",
            real.len(),
            fake.len()
        )));
    }
    let tape = Tape::new();
    let bound = critic.bind(&tape, false);
    let p = gradient_penalty_var(
        critic,
        &bound,
        &stack_clouds(&[real])?,
        &stack_clouds(&[fake])?,
        &[T::lit(u)],
        real.len(),
    );
    Ok(p.value().item().to_f64().unwrap_or(f64::NAN))
}
