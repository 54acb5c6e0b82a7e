use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use bpcgen::config::RunConfig;
use bpcgen::encoder::{Modality, SliceImage};
use bpcgen::error::Error;
use bpcgen::eval::{evaluate, export_colored, Evaluation};
use bpcgen::generator::LATENT_DIM;
use bpcgen::metrics::{chamfer_distance, emd, pc_to_pc_error_total};
use bpcgen::pointcloud::{read_ply, write_ply};
use bpcgen::synth::{build_dataset, read_pgm, DatasetManifest};
use bpcgen::training::{load_checkpoint, load_model, run_outputs, train, TrainState, TrainingData};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Reconstruct 3D brain point clouds from single 2D slices.
#[derive(Parser)]
#[command(name = "bpcgen", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed; falls back to BPCGEN_SEED, then the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a synthetic phantom dataset.
    SynthData {
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        train_fraction: Option<f64>,
        /// Replace a non-empty output directory.
        #[arg(long)]
        overwrite: bool,
    },
    /// Train the encoder, generator and critic.
    Train {
        /// Dataset manifest or its directory.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Train without the critic.
        #[arg(long)]
        no_adversarial: bool,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Region boxes (JSON).
        #[arg(long)]
        regions: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        label: String,
        /// A second checkpoint reported alongside, e.g. an ablation.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, default_value = "without D")]
        baseline_label: String,
    },
    /// Reconstruct a cloud from one PGM slice.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        slice: PathBuf,
        #[arg(long, default_value = "axial")]
        modality: Modality,
        /// Sample z from the posterior instead of using its mean.
        #[arg(long)]
        sample: bool,
    },
    /// Color a cloud by its PC-to-PC error against a target.
    ExportPly { generated: PathBuf, target: PathBuf },
    /// CD, EMD and PC-to-PC error between two PLY files.
    Metrics {
        a: PathBuf,
        b: PathBuf,
        /// Auction tolerance when the clouds exceed the exact limit.
        #[arg(long, default_value_t = 1e-4)]
        epsilon: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(Error::Diverged { checkpoint: Some(p), .. }) = e.downcast_ref::<Error>() {
                eprintln!("emergency checkpoint: {}", p.display());
            }
            ExitCode::from(2)
        }
    }
}

fn seed(global: &Global, fallback: u64) -> anyhow::Result<u64> {
    if let Some(s) = global.seed {
        return Ok(s);
    }
    match std::env::var("BPCGEN_SEED") {
        Ok(v) => v.trim().parse().with_context(|| format!("BPCGEN_SEED={v:?} is not an integer")),
        Err(_) => Ok(fallback),
    }
}

fn required(path: Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    path.ok_or_else(|| anyhow!("no {what}; pass --{what} or set it in --config"))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = cli.global;
    let config = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    config.validate()?;
    let out = g.out.clone().or_else(|| config.out_dir.clone());
    match cli.command {
        Command::SynthData {
            subjects,
            points,
            train_fraction,
            overwrite,
        } => {
            let mut options = config.synth.clone();
            options.subjects = subjects.unwrap_or(options.subjects);
            options.point_count = points.unwrap_or(options.point_count);
            options.train_fraction = train_fraction.unwrap_or(options.train_fraction);
            options.overwrite |= overwrite;
            options.seed = seed(&g, options.seed)?;
            let out = required(out, "out")?;
            let manifest = build_dataset(&options, &out)?;
            println!("wrote {} subjects to {}", manifest.subjects.len(), out.display());
        }
        Command::Train {
            dataset,
            epochs,
            resume,
            no_adversarial,
        } => {
            let out = required(out, "out")?;
            let manifest = DatasetManifest::load(required(dataset.or(config.dataset.clone()), "dataset")?)?;
            let (ckpt, log) = run_outputs(&out);
            let mut state: TrainState<f32> = if resume {
                load_checkpoint(&ckpt)?
            } else {
                let mut train_config = config.train.clone();
                train_config.seed = seed(&g, train_config.seed)?;
                train_config.adversarial &= !no_adversarial;
                if log.exists() {
                    bail!("{} already holds a run; pass --resume or pick another --out", out.display());
                }
                TrainState::new(&config.model, train_config)?
            };
            if let Some(e) = epochs {
                state.config.epochs = e;
                state.config.validate()?;
            }
            let data = TrainingData::from_manifest(&manifest, &state.model, &state.config)?;
            std::fs::create_dir_all(&out).with_context(|| out.display().to_string())?;
            let snapshot = RunConfig {
                model: state.model.config(),
                train: state.config.clone(),
                ..config.clone()
            };
            snapshot.save(out.join("config.json"))?;
            train(&mut state, &data, &out, None)?;
            if let Some(last) = state.history.last() {
                println!("epoch {}: probe CD {:.6}", last.epoch, last.probe_cd);
            }
            println!("checkpoint: {}", ckpt.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            regions,
            label,
            baseline,
            baseline_label,
        } => {
            let manifest = DatasetManifest::load(required(dataset.or(config.dataset.clone()), "dataset")?)?;
            let boxes = match regions {
                Some(p) => bpcgen::pointcloud::read_regions(&p)?,
                None => config.region_boxes()?,
            };
            let score = |path: &Path, label: &str| -> anyhow::Result<Evaluation> {
                let state: TrainState<f32> = load_checkpoint(path)?;
                let mut options = config.eval.clone();
                options.modality = state.config.modality;
                Ok(evaluate(&state.model, &manifest, &boxes, &options, label)?)
            };
            let mut eval = score(&checkpoint, &label)?;
            if let Some(b) = baseline {
                let other = score(&b, &baseline_label)?;
                eval.report.add_comparison(&other.report);
            }
            let text = eval.report.text();
            print!("{text}");
            if let Some(out) = out {
                let recon = out.join("reconstructions");
                std::fs::create_dir_all(&recon).with_context(|| recon.display().to_string())?;
                std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&eval.report)? + "\n")?;
                std::fs::write(out.join("report.txt"), &text)?;
                for (id, pc) in &eval.outputs {
                    let subject = manifest.subjects.iter().find(|s| &s.id == id).expect("evaluated subject");
                    export_colored(pc, &manifest.cloud(subject)?, recon.join(format!("{id}.ply")))?;
                }
            }
        }
        Command::Infer {
            checkpoint,
            slice,
            modality,
            sample,
        } => {
            let out = required(out, "out")?;
            let model = load_model::<f32>(&checkpoint)?;
            let pgm = read_pgm(&slice)?;
            let image = SliceImage::new(pgm.height, pgm.width, pgm.unit_pixels(), modality)?;
            let pc = if sample {
                let mut rng = ChaCha8Rng::seed_from_u64(seed(&g, config.train.seed)?);
                let noise: Vec<f64> = (0..LATENT_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
                model.reconstruct_sampled(&image, &noise)?
            } else {
                model.reconstruct(&image)?
            };
            write_ply(&pc, &out)?;
            println!("wrote {} points to {}", pc.len(), out.display());
        }
        Command::ExportPly { generated, target } => {
            let out = required(out, "out")?;
            export_colored(&read_ply(&generated)?, &read_ply(&target)?, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Metrics { a, b, epsilon } => {
            let (a, b) = (read_ply(&a)?, read_ply(&b)?);
            println!("CD {}", chamfer_distance(&a, &b));
            if a.len() == b.len() {
                let e = emd(&a, &b, config.eval.emd_exact_limit, epsilon)?;
                let method = serde_json::to_value(e.method)?;
                println!("EMD {} ({}, bound gap {})", e.value, method.as_str().unwrap_or(""), e.bound_gap);
            } else {
                println!("EMD undefined (point counts {} and {})", a.len(), b.len());
            }
            println!("PC-to-PC a->b {}", pc_to_pc_error_total(&a, &b));
            println!("PC-to-PC b->a {}", pc_to_pc_error_total(&b, &a));
        }
    }
    Ok(())
}
