//! Adversarial training of the encoder, generator and critic.
//!
//! The encoder and generator minimise
//! `λ₁·KL + λ₂·CD(G(z), Y) − D(G(z))`; the critic minimises
//! `D(fake) − D(real) + λ_gp·(‖∇D(x̂)‖ − 1)²`. Every random draw comes from
//! a generator seeded by `(seed, epoch)`, so a run resumed from a
//! checkpoint continues exactly as an uninterrupted one would.

mod adam;
mod checkpoint;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bpcgen_tape::{Real, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::critic::{gradient_penalty_var, stack_clouds, Critic, CriticConfig, PointCritic};
use crate::encoder::{Encoder, EncoderConfig, Modality, SliceImage};
use crate::error::{io_err, Error, Result};
use crate::generator::{GeneratorConfig, TreeGenerator, LATENT_DIM};
use crate::metrics::{chamfer_distance, chamfer_with_gradient};
use crate::params::ParamTree;
use crate::pointcloud::PointCloud;
use crate::synth::{DatasetManifest, Split};

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, load_model, save_checkpoint, CHECKPOINT_MAGIC};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda_gp: f64,
    pub lambda2_start: f64,
    pub lambda2_end: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub critic_steps_per_gen_step: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// When false the critic is never trained and the `−D` term is dropped.
    pub adversarial: bool,
    /// Write a checkpoint every this many epochs; 0 writes only the last.
    pub checkpoint_every: usize,
    /// Slice plane fed to the encoder.
    pub modality: Modality,
    /// Held-out subjects scored after every epoch.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda_gp: 10.0,
            lambda2_start: 0.1,
            lambda2_end: 1.0,
            learning_rate: 1e-4,
            epochs: 2000,
            batch_size: 16,
            critic_steps_per_gen_step: 5,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adversarial: true,
            checkpoint_every: 100,
            modality: Modality::Axial,
            probe_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda1", self.lambda1),
            ("lambda_gp", self.lambda_gp),
            ("lambda2_start", self.lambda2_start),
            ("lambda2_end", self.lambda2_end),
            ("learning_rate", self.learning_rate),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.lambda2_start > self.lambda2_end {
            return Err(Error::Config("lambda2_start must not exceed lambda2_end".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.critic_steps_per_gen_step == 0 || self.probe_size == 0 {
            return Err(Error::Config(
                "epochs, batch_size, critic_steps_per_gen_step and probe_size must be positive".into(),
            ));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// Weight of the Chamfer term at a zero-based epoch: a linear ramp from
/// `lambda2_start` to `lambda2_end` over the run.
pub fn lambda2_at(epoch: usize, config: &TrainConfig) -> f64 {
    if config.epochs <= 1 {
        return config.lambda2_start;
    }
    let last = config.epochs - 1;
    if epoch >= last {
        return config.lambda2_end;
    }
    config.lambda2_start + (config.lambda2_end - config.lambda2_start) * epoch as f64 / last as f64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub encoder: EncoderConfig,
    pub critic: CriticConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.encoder.validate()?;
        self.critic.validate()
    }
}

/// Encoder, generator and critic trained together.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub encoder: Encoder<T>,
    pub generator: TreeGenerator<T>,
    pub critic: PointCritic<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            encoder: Encoder::new(config.encoder.clone(), &mut rng)?,
            generator: TreeGenerator::new(config.generator.clone(), &mut rng)?,
            critic: PointCritic::new(config.critic.clone(), &mut rng)?,
        })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            generator: self.generator.config().clone(),
            encoder: self.encoder.config().clone(),
            critic: self.critic.config().clone(),
        }
    }

    pub fn points(&self) -> usize {
        self.generator.config().points
    }

    /// Every parameter with its checkpoint name.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.encoder.params.named("encoder");
        out.extend(self.generator.params.named("generator"));
        out.extend(self.critic.named("critic"));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = self.encoder.params.named_mut("encoder");
        out.extend(self.generator.params.named_mut("generator"));
        out.extend(self.critic.named_mut("critic"));
        out
    }

    fn eg_tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = self.encoder.params.leaves();
        v.extend(self.generator.params.leaves());
        v
    }

    fn eg_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.encoder.params.leaves_mut();
        v.extend(self.generator.params.leaves_mut());
        v
    }

    /// Deterministic reconstruction from the posterior mean.
    pub fn reconstruct(&self, image: &SliceImage) -> Result<PointCloud> {
        let post = self.encoder.encode(image)?;
        self.generator.generate(&post.mean)
    }

    /// Reconstruction from `z = μ + σ ⊙ noise`.
    pub fn reconstruct_sampled(&self, image: &SliceImage, noise: &[f64]) -> Result<PointCloud> {
        let post = self.encoder.encode(image)?;
        self.generator.generate(&crate::encoder::reparameterize(&post, noise).z)
    }

    /// Generated clouds `[B·N, 3]` for prepared images, as constants.
    pub fn sample_fakes(&self, images: &Tensor<T>, noise: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let enc = self.encoder.params.bind(&tape, false);
        let gen = self.generator.params.bind(&tape, false);
        let (mean, log_std) = self.encoder.forward(&enc, tape.constant(images.clone()))?;
        let z = mean + log_std.exp() * tape.constant(noise.clone());
        let out = self.generator.forward(&gen, z)?;
        let v = (*out.value()).clone();
        Ok(v)
    }
}

/// Encoder + generator objective and its gradients (encoder parameters
/// first, then generator parameters, in traversal order).
#[derive(Clone, Debug)]
pub struct EgLoss<T> {
    pub total: f64,
    /// Batch-mean KL divergence.
    pub kl: f64,
    /// Batch-mean Chamfer distance.
    pub cd: f64,
    /// Batch-mean critic score of the generated clouds; 0 when ablated.
    pub critic_mean: f64,
    pub grads: Vec<Tensor<T>>,
}

fn to_f64<T: Real>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Sum over the batch of Chamfer distances, passed to the tape with its
/// first-order gradient.
fn chamfer_batch<'t, T: Real>(clouds: Var<'t, T>, targets: &[&PointCloud], points: usize) -> Var<'t, T> {
    let value = clouds.value();
    let mut total = 0.0;
    let mut jac = Vec::with_capacity(value.len());
    for (b, target) in targets.iter().enumerate() {
        let generated: Vec<[f64; 3]> = (0..points)
            .map(|i| {
                let r = value.row(b * points + i);
                [to_f64(r[0]), to_f64(r[1]), to_f64(r[2])]
            })
            .collect();
        let (cd, g) = chamfer_with_gradient(&generated, target.points());
        total += cd;
        jac.extend(g.into_iter().map(T::lit));
    }
    clouds.frozen_scalar(T::lit(total), Tensor::from_vec(value.shape().to_vec(), jac))
}

#[allow(clippy::too_many_arguments)]
pub fn loss_eg<T: Real, C: Critic<T>>(
    encoder: &Encoder<T>,
    generator: &TreeGenerator<T>,
    critic: Option<&C>,
    images: &Tensor<T>,
    targets: &[&PointCloud],
    noise: &Tensor<T>,
    lambda1: f64,
    lambda2: f64,
) -> Result<EgLoss<T>> {
    let batch = targets.len();
    let points = generator.config().points;
    if noise.shape() != [batch, LATENT_DIM] || targets.iter().any(|t| t.len() != points) {
        return Err(Error::InvalidInput("batch, noise and target sizes disagree".into()));
    }
    let tape = Tape::new();
    let enc = encoder.params.bind(&tape, true);
    let gen = generator.params.bind(&tape, true);
    let (mean, log_std) = encoder.forward(&enc, tape.constant(images.clone()))?;
    let z = mean + log_std.exp() * tape.constant(noise.clone());
    let clouds = generator.forward(&gen, z)?;
    let kl = crate::encoder::kl_divergence_var(mean, log_std);
    let cd = chamfer_batch(clouds, targets, points).scale(T::lit(1.0 / batch as f64));
    let mut total = kl.scale(T::lit(lambda1)) + cd.scale(T::lit(lambda2));
    let mut critic_mean = 0.0;
    if let Some(c) = critic {
        let bound = c.bind(&tape, false);
        let score = c.forward(&bound, clouds, points).mean();
        critic_mean = to_f64(score.value().item());
        total = total - score;
    }
    let wrt: Vec<Var<'_, T>> = enc.leaves().into_iter().chain(gen.leaves()).copied().collect();
    let grads = tape.grad(total, &wrt, false);
    Ok(EgLoss {
        total: to_f64(total.value().item()),
        kl: to_f64(kl.value().item()),
        cd: to_f64(cd.value().item()),
        critic_mean,
        grads: grads.iter().map(|g| (*g.value()).clone()).collect(),
    })
}

/// Critic objective and its gradients in the critic's traversal order.
#[derive(Clone, Debug)]
pub struct DLoss<T> {
    pub total: f64,
    /// `mean D(fake) − mean D(real)`.
    pub wasserstein: f64,
    /// Batch-mean penalty before weighting.
    pub penalty: f64,
    pub grads: Vec<Tensor<T>>,
}

pub fn loss_d<T: Real, C: Critic<T>>(
    critic: &C,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    u: &[T],
    lambda_gp: f64,
    points: usize,
) -> Result<DLoss<T>> {
    if real.shape() != fake.shape() || real.rows() != u.len() * points {
        return Err(Error::InvalidInput("real and fake batches disagree".into()));
    }
    let tape = Tape::new();
    let bound = critic.bind(&tape, true);
    let d_real = critic.forward(&bound, tape.constant(real.clone()), points).mean();
    let d_fake = critic.forward(&bound, tape.constant(fake.clone()), points).mean();
    let penalty = gradient_penalty_var(critic, &bound, real, fake, u, points);
    let w = d_fake - d_real;
    let total = w + penalty.scale(T::lit(lambda_gp));
    let grads = tape.grad(total, &C::bound_vars(&bound), false);
    Ok(DLoss {
        total: to_f64(total.value().item()),
        wasserstein: to_f64(w.value().item()),
        penalty: to_f64(penalty.value().item()),
        grads: grads.iter().map(|g| (*g.value()).clone()).collect(),
    })
}

/// One subject ready for training: the resampled slice and its cloud.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub id: String,
    /// `[H·W, 1]` at the encoder's input size.
    pub image: Tensor<T>,
    pub slice: SliceImage,
    pub cloud: PointCloud,
}

#[derive(Clone, Debug)]
pub struct TrainingData<T> {
    pub train: Vec<Sample<T>>,
    pub probe: Vec<Sample<T>>,
}

impl<T: Real> TrainingData<T> {
    pub fn from_manifest(manifest: &DatasetManifest, model: &Model<T>, config: &TrainConfig) -> Result<Self> {
        if manifest.point_count != model.points() {
            return Err(Error::Config(format!(
                "dataset clouds have {} points but the generator emits {}",
                manifest.point_count,
                model.points()
            )));
        }
        let load = |split: Split, limit: usize| -> Result<Vec<Sample<T>>> {
            manifest
                .split(split)
                .into_iter()
                .take(limit)
                .map(|s| {
                    let slice = manifest.slice(s, config.modality)?;
                    Ok(Sample {
                        id: s.id.clone(),
                        image: model.encoder.prepare(&[&slice]),
                        slice,
                        cloud: manifest.cloud(s)?,
                    })
                })
                .collect()
        };
        let data = Self {
            train: load(Split::Train, usize::MAX)?,
            probe: load(Split::Test, config.probe_size)?,
        };
        if data.train.is_empty() || data.probe.is_empty() {
            return Err(Error::InvalidInput("training needs non-empty train and test splits".into()));
        }
        Ok(data)
    }
}

fn stack_images<T: Real>(samples: &[&Sample<T>]) -> Tensor<T> {
    let rows: usize = samples.iter().map(|s| s.image.rows()).sum();
    let data = samples.iter().flat_map(|s| s.image.data().iter().copied()).collect();
    Tensor::from_vec([rows, 1], data)
}

/// One line of the metrics log, written after every generator step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss_d: Option<f64>,
    pub loss_eg: f64,
    pub kl: f64,
    pub cd: f64,
    pub lambda2: f64,
    pub wall_ms: u64,
}

/// Per-epoch summary kept in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub loss_d: Option<f64>,
    pub loss_eg: f64,
    pub kl: f64,
    pub cd: f64,
    pub lambda2: f64,
    /// Mean Chamfer distance over the held-out probe, `z = μ`.
    pub probe_cd: f64,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub config: TrainConfig,
    pub opt_eg: Adam<T>,
    pub opt_d: Adam<T>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub history: Vec<EpochRecord>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bpc";
pub const EMERGENCY_FILE: &str = "emergency.bpc";

impl<T: Real> TrainState<T> {
    pub fn new(model_config: &ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(model_config, config.seed)?;
        let opt = |ts: Vec<&Tensor<T>>| Adam::new(ts, config.learning_rate, config.adam_beta1, config.adam_beta2);
        Ok(Self {
            opt_eg: opt(model.eg_tensors()),
            opt_d: opt(model.critic.leaves()),
            model,
            config,
            epoch: 0,
            step: 0,
            history: Vec::new(),
        })
    }

    /// Mean Chamfer distance of posterior-mean reconstructions.
    pub fn probe_cd(&self, samples: &[Sample<T>]) -> Result<f64> {
        let mut total = 0.0;
        for s in samples {
            let pc = self.model.reconstruct(&s.slice)?;
            total += chamfer_distance(&pc, &s.cloud);
        }
        Ok(total / samples.len() as f64)
    }

    /// Runs one epoch, reporting each generator step to `log`.
    pub fn run_epoch(&mut self, data: &TrainingData<T>, log: &mut dyn FnMut(&StepRecord)) -> Result<EpochRecord> {
        let e = self.epoch;
        let cfg = self.config.clone();
        let lambda2 = lambda2_at(e, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(e as u64 + 1);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let started = Instant::now();
        let (mut sum_d, mut sum_eg, mut sum_kl, mut sum_cd) = (0.0, 0.0, 0.0, 0.0);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (b, idx) in batches.iter().enumerate() {
            let samples: Vec<&Sample<T>> = idx.iter().map(|&i| &data.train[i]).collect();
            let images = stack_images(&samples);
            let targets: Vec<&PointCloud> = samples.iter().map(|s| &s.cloud).collect();
            let draw_noise = |rng: &mut ChaCha8Rng| {
                Tensor::from_vec(
                    [samples.len(), LATENT_DIM],
                    (0..samples.len() * LATENT_DIM)
                        .map(|_| T::lit(StandardNormal.sample(rng)))
                        .collect(),
                )
            };
            let diverged = |detail: String, state: &Self| -> Error {
                state.emergency(e + 1, b, detail)
            };

            let mut loss_d_value = None;
            if cfg.adversarial {
                let real: Tensor<T> = stack_clouds(&targets)?;
                for _ in 0..cfg.critic_steps_per_gen_step {
                    let noise = draw_noise(&mut rng);
                    let u: Vec<T> = (0..samples.len()).map(|_| T::lit(rng.gen_range(0.0..1.0))).collect();
                    let d = self
                        .critic_step(&images, &real, &noise, &u)
                        .map_err(|err| diverged(format!("critic step: {err}"), self))?;
                    loss_d_value = Some(d);
                }
            }

            let noise = draw_noise(&mut rng);
            let eg = self
                .eg_step(&images, &targets, &noise, lambda2)
                .map_err(|err| diverged(format!("encoder/generator step: {err}"), self))?;
            self.step += 1;

            sum_d += loss_d_value.unwrap_or(0.0);
            sum_eg += eg.total;
            sum_kl += eg.kl;
            sum_cd += eg.cd;
            log(&StepRecord {
                epoch: e + 1,
                step: self.step,
                loss_d: loss_d_value,
                loss_eg: eg.total,
                kl: eg.kl,
                cd: eg.cd,
                lambda2,
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }
        let n = batches.len() as f64;
        let probe_cd = self
            .probe_cd(&data.probe)
            .map_err(|err| self.emergency(e + 1, batches.len(), format!("probe: {err}")))?;
        let record = EpochRecord {
            epoch: e + 1,
            loss_d: cfg.adversarial.then_some(sum_d / n),
            loss_eg: sum_eg / n,
            kl: sum_kl / n,
            cd: sum_cd / n,
            lambda2,
            probe_cd,
        };
        self.epoch += 1;
        self.history.push(record.clone());
        Ok(record)
    }

    /// One critic update against fakes from the current encoder and
    /// generator. Returns the critic loss.
    pub fn critic_step(&mut self, images: &Tensor<T>, real: &Tensor<T>, noise: &Tensor<T>, u: &[T]) -> Result<f64> {
        let fake = self.model.sample_fakes(images, noise)?;
        let d = loss_d(&self.model.critic, real, &fake, u, self.config.lambda_gp, self.model.points())?;
        if !(d.total.is_finite() && d.grads.iter().all(|g| g.all_finite())) {
            return Err(Error::NonFinite { stage: "critic", layer: 0 });
        }
        self.opt_d.update(self.model.critic.leaves_mut(), &d.grads);
        Ok(d.total)
    }

    /// One encoder + generator update.
    pub fn eg_step(
        &mut self,
        images: &Tensor<T>,
        targets: &[&PointCloud],
        noise: &Tensor<T>,
        lambda2: f64,
    ) -> Result<EgLoss<T>> {
        let critic = self.config.adversarial.then_some(&self.model.critic);
        let eg = loss_eg(
            &self.model.encoder,
            &self.model.generator,
            critic,
            images,
            targets,
            noise,
            self.config.lambda1,
            lambda2,
        )?;
        if !(eg.total.is_finite() && eg.grads.iter().all(|g| g.all_finite())) {
            return Err(Error::NonFinite { stage: "generator", layer: 0 });
        }
        let params = self.model.eg_tensors_mut();
        self.opt_eg.update(params, &eg.grads);
        Ok(eg)
    }

    fn emergency(&self, epoch: usize, batch: usize, detail: String) -> Error {
        Error::Diverged {
            epoch,
            batch,
            detail,
            checkpoint: None,
        }
    }
}

/// Trains until `config.epochs` (or `stop_after` more epochs), writing the
/// metrics log and checkpoints into `out_dir`.
pub fn train<T: Real>(
    state: &mut TrainState<T>,
    data: &TrainingData<T>,
    out_dir: impl AsRef<Path>,
    stop_after: Option<usize>,
) -> Result<()> {
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let log_path = out.join(METRICS_FILE);
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    let target = match stop_after {
        Some(n) => (state.epoch + n).min(state.config.epochs),
        None => state.config.epochs,
    };
    let ckpt = out.join(CHECKPOINT_FILE);
    while state.epoch < target {
        let mut write_err = None;
        let result = state.run_epoch(data, &mut |rec| {
            let line = serde_json::to_string(rec).expect("record serializes");
            if let Err(e) = writeln!(log, "{line}") {
                write_err.get_or_insert(e);
            }
        });
        if let Some(e) = write_err {
            return Err(io_err(&log_path)(e));
        }
        match result {
            Ok(_) => {}
            Err(Error::Diverged { epoch, batch, detail, .. }) => {
                let path = out.join(EMERGENCY_FILE);
                let saved = save_checkpoint(state, &path).ok().map(|_| path);
                return Err(Error::Diverged {
                    epoch,
                    batch,
                    detail,
                    checkpoint: saved,
                });
            }
            Err(e) => return Err(e),
        }
        let every = state.config.checkpoint_every;
        if (every > 0 && state.epoch.is_multiple_of(every)) || state.epoch == target {
            save_checkpoint(state, &ckpt)?;
        }
    }
    Ok(())
}

/// Paths produced by a training run.
pub fn run_outputs(out_dir: &Path) -> (PathBuf, PathBuf) {
    (out_dir.join(CHECKPOINT_FILE), out_dir.join(METRICS_FILE))
}

#[cfg(test)]
mod tests;
