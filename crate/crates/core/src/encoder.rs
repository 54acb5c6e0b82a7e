//! Variational slice encoder.
//!
//! A small residual network maps one grayscale slice to the mean and
//! half-log-variance of a diagonal Gaussian over the latent space. Feature
//! maps are stored channels-last as `[B·H·W, C]` so that every convolution
//! is an `im2col` followed by one matrix product.

use bpcgen_tape::{ConvGeometry, Real, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::LATENT_DIM;
use crate::params::{bind_all, join, uniform_init, Affine, LeafSource, ParamTree};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Axial,
    Coronal,
    Sagittal,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Axial, Modality::Coronal, Modality::Sagittal];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Axial => "axial",
            Modality::Coronal => "coronal",
            Modality::Sagittal => "sagittal",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown modality {s:?}")))
    }
}

/// A 2D slice with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    pub modality: Modality,
}

impl SliceImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>, modality: Modality) -> Result<Self> {
        if height < 8 || width < 8 {
            return Err(Error::InvalidInput(format!("slice must be at least 8×8, got {height}×{width}")));
        }
        if pixels.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "{} pixels for a {height}×{width} slice",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidInput(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
            modality,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Bilinear resampling with half-pixel centres and edge clamping.
    pub fn resample(&self, height: usize, width: usize) -> Vec<f64> {
        let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
            let scale = inp as f64 / out as f64;
            (0..out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                    let lo = src.floor() as usize;
                    let hi = (lo + 1).min(inp - 1);
                    (lo, hi, src - lo as f64)
                })
                .collect()
        };
        let ys = axis(height, self.height);
        let xs = axis(width, self.width);
        let mut out = Vec::with_capacity(height * width);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = self.at(y0, x0) * (1.0 - fx) + self.at(y0, x1) * fx;
                let bottom = self.at(y1, x0) * (1.0 - fx) + self.at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Channel width of each residual stage; stages after the first halve
    /// the resolution.
    pub stage_widths: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_height: 96,
            input_width: 112,
            stage_widths: vec![32, 64, 128, 256],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return Err(Error::Config("encoder needs at least one positive stage width".into()));
        }
        if self.input_height < 8 || self.input_width < 8 {
            return Err(Error::Config("encoder input must be at least 8×8".into()));
        }
        Ok(())
    }

    fn stride(stage: usize) -> usize {
        if stage == 0 {
            1
        } else {
            2
        }
    }
}

/// Two 3×3 convolutions with a skip connection; the skip is a strided 1×1
/// projection when the block changes shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock<P> {
    pub conv1: Affine<P>,
    pub conv2: Affine<P>,
    pub shortcut: Option<Affine<P>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<P> {
    pub stem: Affine<P>,
    pub blocks: Vec<ResidualBlock<P>>,
    pub mean_head: Affine<P>,
    /// Predicts `ln σ`.
    pub log_std_head: Affine<P>,
}

impl<P> ParamTree<P> for EncoderParams<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (s, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("stage{s}"));
            b.conv1.visit(&join(&p, "conv1"), f);
            b.conv2.visit(&join(&p, "conv2"), f);
            if let Some(sc) = &b.shortcut {
                sc.visit(&join(&p, "shortcut"), f);
            }
        }
        self.mean_head.visit(&join(prefix, "mean_head"), f);
        self.log_std_head.visit(&join(prefix, "log_std_head"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (s, b) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("stage{s}"));
            b.conv1.visit_mut(&join(&p, "conv1"), f);
            b.conv2.visit_mut(&join(&p, "conv2"), f);
            if let Some(sc) = &mut b.shortcut {
                sc.visit_mut(&join(&p, "shortcut"), f);
            }
        }
        self.mean_head.visit_mut(&join(prefix, "mean_head"), f);
        self.log_std_head.visit_mut(&join(prefix, "log_std_head"), f);
    }
}

impl<P> EncoderParams<P> {
    pub(crate) fn rebuild<Q, I: Iterator<Item = Q>>(&self, src: &mut LeafSource<I>) -> EncoderParams<Q> {
        EncoderParams {
            stem: self.stem.rebuild(src),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResidualBlock {
                    conv1: b.conv1.rebuild(src),
                    conv2: b.conv2.rebuild(src),
                    shortcut: b.shortcut.as_ref().map(|s| s.rebuild(src)),
                })
                .collect(),
            mean_head: self.mean_head.rebuild(src),
            log_std_head: self.log_std_head.rebuild(src),
        }
    }
}

fn conv_init<T: Real>(kernel: usize, cin: usize, cout: usize, rng: &mut impl Rng) -> Affine<Tensor<T>> {
    Affine {
        weight: uniform_init(kernel * kernel * cin, cout, rng),
        bias: Tensor::zeros([cout]),
    }
}

impl<T: Real> EncoderParams<Tensor<T>> {
    pub fn init(config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let w = &config.stage_widths;
        let stem = conv_init(3, 1, w[0], rng);
        let mut blocks = Vec::new();
        let mut cin = w[0];
        for (s, &cout) in w.iter().enumerate() {
            let stride = EncoderConfig::stride(s);
            blocks.push(ResidualBlock {
                conv1: conv_init(3, cin, cout, rng),
                conv2: conv_init(3, cout, cout, rng),
                shortcut: (stride != 1 || cin != cout).then(|| conv_init(1, cin, cout, rng)),
            });
            cin = cout;
        }
        Ok(Self {
            stem,
            blocks,
            mean_head: Affine::init(cin, LATENT_DIM, rng),
            log_std_head: Affine::init(cin, LATENT_DIM, rng),
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> EncoderParams<Var<'t, T>> {
        self.rebuild(&mut LeafSource(bind_all(tape, self, trainable).into_iter()))
    }
}

/// Spatial extent of a batch of channels-last feature maps.
#[derive(Clone, Copy, Debug)]
struct Extent {
    batch: usize,
    height: usize,
    width: usize,
}

fn conv<'t, T: Real>(
    x: Var<'t, T>,
    at: Extent,
    layer: &Affine<Var<'t, T>>,
    kernel: usize,
    stride: usize,
) -> (Var<'t, T>, Extent) {
    let geom = ConvGeometry {
        batch: at.batch,
        height: at.height,
        width: at.width,
        channels: x.shape()[1],
        kernel,
        stride,
        padding: kernel / 2,
    };
    let out = Extent {
        batch: at.batch,
        height: geom.out_height(),
        width: geom.out_width(),
    };
    (layer.apply(x.im2col(geom)), out)
}

fn relu<T: Real>(x: Var<'_, T>) -> Var<'_, T> {
    x.leaky_relu(T::zero())
}

/// Mean and standard deviation of the latent posterior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianPosterior {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::InvalidInput("mean and std lengths differ".into()));
        }
        if mean.iter().chain(&std).any(|v| !v.is_finite()) || std.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidInput("posterior needs finite mean and positive std".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub z: Vec<f64>,
}

/// `z = μ + σ ⊙ noise`.
pub fn reparameterize(post: &GaussianPosterior, noise: &[f64]) -> LatentCode {
    assert_eq!(noise.len(), post.mean.len(), "noise dimension");
    LatentCode {
        z: post
            .mean
            .iter()
            .zip(&post.std)
            .zip(noise)
            .map(|((m, s), n)| m + s * n)
            .collect(),
    }
}

/// `KL(N(μ, σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − 1 − ln σ²)`.
pub fn kl_divergence(post: &GaussianPosterior) -> f64 {
    0.5 * post
        .mean
        .iter()
        .zip(&post.std)
        .map(|(m, s)| m * m + s * s - 1.0 - (s * s).ln())
        .sum::<f64>()
}

/// Batch-mean KL from `μ` and `ln σ`, both `[B, D]`.
pub fn kl_divergence_var<'t, T: Real>(mean: Var<'t, T>, log_std: Var<'t, T>) -> Var<'t, T> {
    let batch = mean.shape()[0];
    let per = mean.square() + log_std.scale(T::lit(2.0)).exp() - log_std.scale(T::lit(2.0));
    per.sum()
        .add_scalar(T::lit(-((mean.value().len()) as f64)))
        .scale(T::lit(0.5 / batch as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    config: EncoderConfig,
    pub params: EncoderParams<Tensor<T>>,
}

impl<T: Real> Encoder<T> {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let params = EncoderParams::init(&config, rng)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: EncoderConfig, params: EncoderParams<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let fresh = EncoderParams::<Tensor<T>>::init(&config, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        let shapes = |p: &EncoderParams<Tensor<T>>| -> Vec<Vec<usize>> {
            p.leaves().iter().map(|t| t.shape().to_vec()).collect()
        };
        if shapes(&fresh) != shapes(&params) {
            return Err(Error::Config("encoder parameter shapes do not match config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Resamples slices to the input size and stacks them as `[B·H·W, 1]`.
    pub fn prepare(&self, images: &[&SliceImage]) -> Tensor<T> {
        let (h, w) = (self.config.input_height, self.config.input_width);
        let data = images
            .iter()
            .flat_map(|im| im.resample(h, w))
            .map(T::lit)
            .collect();
        Tensor::from_vec([images.len() * h * w, 1], data)
    }

    /// `(μ, ln σ)` for a prepared batch, each `[B, 96]`.
    pub fn forward<'t>(
        &self,
        params: &EncoderParams<Var<'t, T>>,
        input: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (h, w) = (self.config.input_height, self.config.input_width);
        let batch = input.shape()[0] / (h * w);
        if input.shape() != [batch * h * w, 1] || batch == 0 {
            return Err(Error::InvalidInput(format!("encoder input shape {:?}", input.shape())));
        }
        let check = |v: &Var<'t, T>, layer: usize| -> Result<()> {
            if v.value().all_finite() {
                Ok(())
            } else {
                Err(Error::NonFinite { stage: "encoder", layer })
            }
        };
        let at = Extent { batch, height: h, width: w };
        let (x, mut at) = conv(input, at, &params.stem, 3, 1);
        let mut x = relu(x);
        check(&x, 0)?;
        for (s, block) in params.blocks.iter().enumerate() {
            let stride = EncoderConfig::stride(s);
            let (y, out) = conv(x, at, &block.conv1, 3, stride);
            let (y, _) = conv(relu(y), out, &block.conv2, 3, 1);
            let skip = match &block.shortcut {
                Some(p) => conv(x, at, p, 1, stride).0,
                None => x,
            };
            x = relu(y + skip);
            at = out;
            check(&x, s + 1)?;
        }
        let pixels = at.height * at.width;
        let pooled = x
            .scatter_add_rows((0..batch * pixels).map(|r| r / pixels).collect(), batch)
            .scale(T::lit(1.0 / pixels as f64));
        let mean = params.mean_head.apply(pooled);
        let log_std = params.log_std_head.apply(pooled);
        check(&mean, params.blocks.len() + 1)?;
        check(&log_std, params.blocks.len() + 1)?;
        Ok((mean, log_std))
    }

    pub fn encode(&self, image: &SliceImage) -> Result<GaussianPosterior> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let (mean, log_std) = self.forward(&bound, tape.constant(self.prepare(&[image])))?;
        let to_f64 = |v: &Var<'_, T>| -> Vec<f64> {
            v.value().data().iter().map(|x| x.to_f64().expect("finite")).collect()
        };
        let std: Vec<f64> = to_f64(&log_std).into_iter().map(f64::exp).collect();
        if std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::NonFinite {
                stage: "encoder",
                layer: self.params.blocks.len() + 1,
            });
        }
        Ok(GaussianPosterior {
            mean: to_f64(&mean),
            std,
        })
    }
}
