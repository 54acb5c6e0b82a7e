use super::*;
use crate::critic::{critic_score, gradient_penalty, LinearCritic};
use crate::encoder::{kl_divergence, reparameterize};
use crate::synth::{build_dataset, DatasetOptions};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        generator: GeneratorConfig {
            support_count: 2,
            ..GeneratorConfig::with_layers(vec![2, 4], vec![96, 8, 3])
        },
        encoder: EncoderConfig {
            input_height: 16,
            input_width: 16,
            stage_widths: vec![4, 8],
        },
        critic: CriticConfig {
            point_widths: vec![3, 8, 16],
            head_widths: vec![16, 8, 1],
            leaky_slope: 0.2,
        },
    }
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        batch_size: 2,
        critic_steps_per_gen_step: 1,
        learning_rate: 1e-3,
        checkpoint_every: 1,
        probe_size: 2,
        ..TrainConfig::default()
    }
}

fn tiny_dataset(dir: &Path) -> DatasetManifest {
    let opts = DatasetOptions {
        subjects: 6,
        train_fraction: 0.67,
        point_count: 8,
        seed: 3,
        ..DatasetOptions::default()
    };
    build_dataset(&opts, dir).unwrap()
}

fn noise(rng: &mut ChaCha8Rng, b: usize) -> Tensor<f64> {
    Tensor::from_vec([b, LATENT_DIM], (0..b * LATENT_DIM).map(|_| StandardNormal.sample(rng)).collect())
}

#[test]
fn lambda2_schedule() {
    let cfg = TrainConfig::default();
    assert_eq!(lambda2_at(0, &cfg), 0.1);
    assert_eq!(lambda2_at(1999, &cfg), 1.0);
    assert!((lambda2_at(999, &cfg) - 0.55).abs() < 1e-3);
    let mut prev = 0.0;
    for e in 0..2000 {
        let v = lambda2_at(e, &cfg);
        assert!(v >= prev);
        prev = v;
    }
    let one = TrainConfig { epochs: 1, ..cfg };
    assert_eq!(lambda2_at(0, &one), 0.1);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { lambda2_start: 2.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { learning_rate: -1.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { adam_beta2: 1.0, ..TrainConfig::default() }.validate().is_err());
    let json = serde_json::to_string(&TrainConfig::default()).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), TrainConfig::default());
}

fn random_slice(rng: &mut ChaCha8Rng) -> SliceImage {
    SliceImage::new(20, 18, (0..360).map(|_| rng.gen_range(0.0..1.0)).collect(), Modality::Axial).unwrap()
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new((0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect())
        .unwrap()
}

#[test]
fn eg_loss_zero_weights_and_zero_critic() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::<f64>::new(&tiny_model(), 1).unwrap();
    model.critic.leaves_mut().into_iter().for_each(|t| t.data_mut().fill(0.0));
    let (a, b) = (random_slice(&mut rng), random_slice(&mut rng));
    let images = model.encoder.prepare(&[&a, &b]);
    let targets = [random_cloud(&mut rng, 8), random_cloud(&mut rng, 8)];
    let t: Vec<&PointCloud> = targets.iter().collect();
    let l = loss_eg(&model.encoder, &model.generator, Some(&model.critic), &images, &t, &noise(&mut rng, 2), 0.0, 0.0)
        .unwrap();
    assert_eq!(l.total, 0.0);
}

#[test]
fn eg_loss_chamfer_vanishes_on_exact_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = Model::<f64>::new(&tiny_model(), 2).unwrap();
    // Zero weights leave the final bias as every output point.
    model.generator.params.leaves_mut().into_iter().for_each(|t| t.data_mut().fill(0.0));
    let last = model.generator.params.layers.last_mut().unwrap();
    last.bias = Tensor::from_vec([3], vec![0.25, -0.5, 0.75]);
    let target = PointCloud::new(vec![[0.25, -0.5, 0.75]; 8]).unwrap();
    let img = random_slice(&mut rng);
    let images = model.encoder.prepare(&[&img]);
    let l = loss_eg::<f64, PointCritic<f64>>(&model.encoder, &model.generator, None, &images, &[&target], &noise(&mut rng, 1), 0.0, 1.0)
        .unwrap();
    assert_eq!(l.cd, 0.0);
    assert_eq!(l.total, 0.0);
}

/// λ₁·KL + λ₂·CD − D̄ assembled from the separately tested primitives.
#[test]
fn eg_loss_matches_hand_assembly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = Model::<f64>::new(&tiny_model(), 3).unwrap();
    let slices = [random_slice(&mut rng), random_slice(&mut rng)];
    let targets = [random_cloud(&mut rng, 8), random_cloud(&mut rng, 8)];
    let eps = noise(&mut rng, 2);
    let images = model.encoder.prepare(&[&slices[0], &slices[1]]);
    let t: Vec<&PointCloud> = targets.iter().collect();
    let (l1, l2) = (0.1, 0.4);
    let got = loss_eg(&model.encoder, &model.generator, Some(&model.critic), &images, &t, &eps, l1, l2).unwrap();

    let (mut kl, mut cd, mut d) = (0.0, 0.0, 0.0);
    for b in 0..2 {
        let post = model.encoder.encode(&slices[b]).unwrap();
        kl += kl_divergence(&post) / 2.0;
        let z = reparameterize(&post, eps.row(b));
        let pc = model.generator.generate(&z.z).unwrap();
        cd += chamfer_distance(&pc, &targets[b]) / 2.0;
        d += critic_score(&model.critic, &pc).unwrap() / 2.0;
    }
    assert!((got.kl - kl).abs() < 1e-10);
    assert!((got.cd - cd).abs() < 1e-10);
    assert!((got.critic_mean - d).abs() < 1e-10);
    assert!((got.total - (l1 * kl + l2 * cd - d)).abs() < 1e-10);
}

#[test]
fn eg_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = Model::<f64>::new(&tiny_model(), 4).unwrap();
    let slices = [random_slice(&mut rng), random_slice(&mut rng)];
    let targets = [random_cloud(&mut rng, 8), random_cloud(&mut rng, 8)];
    let eps = noise(&mut rng, 2);
    let images = model.encoder.prepare(&[&slices[0], &slices[1]]);
    let t: Vec<&PointCloud> = targets.iter().collect();
    let eval = |m: &Model<f64>| {
        loss_eg(&m.encoder, &m.generator, Some(&m.critic), &images, &t, &eps, 0.1, 0.5).unwrap()
    };
    let base = eval(&model);
    let analytic: Vec<f64> = base.grads.iter().flat_map(|g| g.data().to_vec()).collect();
    // Spot-check a spread of coordinates across every tensor.
    let flat: Vec<f64> = model.eg_tensors().iter().flat_map(|t| t.data().to_vec()).collect();
    let picks: Vec<usize> = (0..flat.len()).step_by(flat.len() / 150 + 1).collect();
    let h = 1e-6;
    let mut ok = 0;
    for &k in &picks {
        let perturbed = |delta: f64| {
            let mut m = model.clone();
            let mut i = 0;
            for t in m.eg_tensors_mut() {
                for v in t.data_mut() {
                    if i == k {
                        *v += delta;
                    }
                    i += 1;
                }
            }
            eval(&m).total
        };
        let num = (perturbed(h) - perturbed(-h)) / (2.0 * h);
        if (num - analytic[k]).abs() <= 1e-7 || bpcgen_tape::fd::relative_error(num, analytic[k]) <= 1e-4 {
            ok += 1;
        }
    }
    assert!(ok as f64 >= 0.99 * picks.len() as f64, "{ok}/{}", picks.len());
}

#[test]
fn d_loss_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let clouds = [random_cloud(&mut rng, 5), random_cloud(&mut rng, 5)];
    let real: Tensor<f64> = stack_clouds(&[&clouds[0], &clouds[1]]).unwrap();
    let unit_w: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = unit_w.iter().map(|v| v * v).sum::<f64>().sqrt();
    for (scale, expect) in [(1.0, 0.0), (3.0, 40.0)] {
        let c = LinearCritic::new(Tensor::from_vec([5, 3], unit_w.iter().map(|v| v * scale / norm).collect()), 0.7);
        let l = loss_d(&c, &real, &real, &[0.3, 0.6], 10.0, 5).unwrap();
        assert!((l.total - expect).abs() < 1e-9, "{} vs {expect}", l.total);
    }
}

#[test]
fn d_loss_matches_hand_assembly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = Model::<f64>::new(&tiny_model(), 5).unwrap();
    let reals = [random_cloud(&mut rng, 8), random_cloud(&mut rng, 8)];
    let fakes = [random_cloud(&mut rng, 8), random_cloud(&mut rng, 8)];
    let u = [0.2, 0.9];
    let l = loss_d(
        &model.critic,
        &stack_clouds(&[&reals[0], &reals[1]]).unwrap(),
        &stack_clouds(&[&fakes[0], &fakes[1]]).unwrap(),
        &u,
        10.0,
        8,
    )
    .unwrap();
    let mut expect = 0.0;
    for b in 0..2 {
        expect += (critic_score(&model.critic, &fakes[b]).unwrap() - critic_score(&model.critic, &reals[b]).unwrap()) / 2.0;
        expect += 10.0 * gradient_penalty(&model.critic, &reals[b], &fakes[b], u[b]).unwrap() / 2.0;
    }
    assert!((l.total - expect).abs() < 1e-10);
}

fn snapshot(m: &Model<f64>) -> (Vec<Tensor<f64>>, Vec<Tensor<f64>>) {
    (m.eg_tensors().into_iter().cloned().collect(), m.critic.leaves().into_iter().cloned().collect())
}

#[test]
fn updates_touch_only_their_own_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut state = TrainState::<f64>::new(&tiny_model(), tiny_train()).unwrap();
    let slices = [random_slice(&mut rng), random_slice(&mut rng)];
    let targets = [random_cloud(&mut rng, 8), random_cloud(&mut rng, 8)];
    let t: Vec<&PointCloud> = targets.iter().collect();
    let images = state.model.encoder.prepare(&[&slices[0], &slices[1]]);
    let real = stack_clouds(&t).unwrap();

    let (eg0, d0) = snapshot(&state.model);
    state.critic_step(&images, &real, &noise(&mut rng, 2), &[0.5, 0.5]).unwrap();
    let (eg1, d1) = snapshot(&state.model);
    assert_eq!(eg0, eg1);
    assert_ne!(d0, d1);

    state.eg_step(&images, &t, &noise(&mut rng, 2), 0.5).unwrap();
    let (eg2, d2) = snapshot(&state.model);
    assert_eq!(d1, d2);
    assert!(eg1.iter().zip(&eg2).filter(|(a, b)| a != b).count() > eg1.len() / 2);

    state.opt_eg.learning_rate = 0.0;
    state.opt_d.learning_rate = 0.0;
    state.critic_step(&images, &real, &noise(&mut rng, 2), &[0.1, 0.2]).unwrap();
    state.eg_step(&images, &t, &noise(&mut rng, 2), 0.5).unwrap();
    assert_eq!(snapshot(&state.model), (eg2, d2));
}

fn log_without_wall(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

#[test]
fn smoke_run_writes_schema_checkpoint_and_resumes_identically() {
    let data_dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(data_dir.path());
    let model_cfg = tiny_model();

    let full = tempfile::tempdir().unwrap();
    let mut state = TrainState::<f32>::new(&model_cfg, tiny_train()).unwrap();
    let data = TrainingData::from_manifest(&manifest, &state.model, &state.config).unwrap();
    assert_eq!((data.train.len(), data.probe.len()), (4, 2));
    train(&mut state, &data, full.path(), None).unwrap();
    assert_eq!(state.epoch, 4);
    assert_eq!(state.history.len(), 4);

    let (ckpt, log) = run_outputs(full.path());
    let first = std::fs::read_to_string(&log).unwrap();
    let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    let keys: Vec<&str> = line.as_object().unwrap().keys().map(String::as_str).collect();
    let mut expect = vec!["cd", "epoch", "kl", "lambda2", "loss_d", "loss_eg", "step", "wall_ms"];
    expect.sort();
    let mut keys_sorted = keys.clone();
    keys_sorted.sort();
    assert_eq!(keys_sorted, expect);
    assert_eq!(first.lines().count(), 8);

    // Reload reproduces forward outputs bit for bit.
    let reloaded: Model<f32> = load_model(&ckpt).unwrap();
    let s = &data.probe[0].slice;
    assert_eq!(reloaded.reconstruct(s).unwrap(), state.model.reconstruct(s).unwrap());
    assert_eq!(reloaded, state.model);

    // Two epochs, checkpoint, resume for the remaining two.
    let split = tempfile::tempdir().unwrap();
    let mut first_half = TrainState::<f32>::new(&model_cfg, tiny_train()).unwrap();
    train(&mut first_half, &data, split.path(), Some(2)).unwrap();
    let mut resumed: TrainState<f32> = load_checkpoint(split.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(resumed.epoch, 2);
    train(&mut resumed, &data, split.path(), None).unwrap();
    assert_eq!(log_without_wall(&log), log_without_wall(&split.path().join(METRICS_FILE)));
    assert_eq!(resumed.model, state.model);
    assert_eq!(resumed.history, state.history);
}

#[test]
fn ablation_logs_null_critic_loss() {
    let data_dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(data_dir.path());
    let out = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { adversarial: false, epochs: 1, ..tiny_train() };
    let mut state = TrainState::<f32>::new(&tiny_model(), cfg).unwrap();
    let critic_before = state.model.critic.clone();
    let data = TrainingData::from_manifest(&manifest, &state.model, &state.config).unwrap();
    train(&mut state, &data, out.path(), None).unwrap();
    let log = log_without_wall(&out.path().join(METRICS_FILE));
    assert!(log.iter().all(|l| l["loss_d"].is_null()));
    assert_eq!(state.model.critic, critic_before);
    assert_eq!(state.history[0].loss_d, None);
}

#[test]
fn divergence_saves_emergency_checkpoint() {
    let data_dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(data_dir.path());
    let out = tempfile::tempdir().unwrap();
    let mut state = TrainState::<f32>::new(&tiny_model(), tiny_train()).unwrap();
    let data = TrainingData::from_manifest(&manifest, &state.model, &state.config).unwrap();
    state.model.generator.params.layers[0].bias.data_mut()[0] = f32::NAN;
    match train(&mut state, &data, out.path(), None) {
        Err(Error::Diverged { epoch, batch, checkpoint, .. }) => {
            assert_eq!((epoch, batch), (1, 0));
            let path = checkpoint.expect("emergency checkpoint written");
            assert!(path.ends_with(EMERGENCY_FILE) && path.is_file());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn mismatched_point_count_is_rejected() {
    let data_dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(data_dir.path());
    let mut cfg = tiny_model();
    cfg.generator = GeneratorConfig::with_layers(vec![4, 4], vec![96, 8, 3]);
    let state = TrainState::<f32>::new(&cfg, tiny_train()).unwrap();
    assert!(matches!(
        TrainingData::from_manifest(&manifest, &state.model, &state.config),
        Err(Error::Config(_))
    ));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.bpc");
    std::fs::write(&p, b"NOTACKPT00000000").unwrap();
    assert!(matches!(load_model::<f32>(&p), Err(Error::Parse { .. })));
    let mut bytes = CHECKPOINT_MAGIC.to_vec();
    bytes.extend_from_slice(&1000u64.to_le_bytes());
    std::fs::write(&p, &bytes).unwrap();
    assert!(load_model::<f32>(&p).is_err());
}
