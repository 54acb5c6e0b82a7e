//! Acceptance gate: every criterion runs at its stated tolerance and prints
//! one PASS/FAIL line. The process fails if any gating criterion fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use bpcgen::critic::{interpolate, stack_clouds, Critic, CriticConfig, LinearCritic, PointCritic};
use bpcgen::encoder::{kl_divergence, kl_divergence_var, EncoderConfig, GaussianPosterior};
use bpcgen::eval::{evaluate, EvalOptions};
use bpcgen::generator::{gcn_block, Activation, GcnLayerParams, GeneratorConfig, LayerState, TreeGenerator, TreeTopology};
use bpcgen::metrics::{chamfer_distance, chamfer_with_gradient, emd_exact, pc_to_pc_error_total};
use bpcgen::params::ParamTree;
use bpcgen::pointcloud::{default_regions, read_ply, Point, PointCloud};
use bpcgen::synth::{build_dataset, decode_pgm, DatasetManifest, DatasetOptions};
use bpcgen::training::{
    lambda2_at, loss_d, train, ModelConfig, TrainConfig, TrainState, TrainingData, CHECKPOINT_FILE, METRICS_FILE,
};
use bpcgen_tape::fd::{central_gradient, relative_error};
use bpcgen_tape::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    /// Informational; never fails the gate.
    Reported(String),
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new((0..n).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect()).unwrap()
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_vec([rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn dist(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Minimum transport cost over every permutation (Heap's algorithm).
fn emd_by_enumeration(a: &[Point], b: &[Point]) -> f64 {
    let n = a.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let cost = |p: &[usize]| (0..n).map(|i| dist(&a[i], &b[p[i]])).sum::<f64>();
    let mut best = cost(&perm);
    let mut c = vec![0; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(cost(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for k in 0..200 {
        let n = 2 + k % 6;
        let (a, b) = (random_cloud(&mut rng, n), random_cloud(&mut rng, n));
        let exact = emd_exact(&a, &b).unwrap().value;
        worst = worst.max((exact - emd_by_enumeration(a.points(), b.points())).abs());
    }
    let secs = started.elapsed().as_secs_f64();
    check(worst <= 1e-9 && secs < 10.0, format!("max |exact - enumeration| = {worst:.2e}, {secs:.2} s"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (mut worst, mut identity_ok) = (0.0f64, true);
    for _ in 0..50 {
        let (n, m) = (rng.gen_range(1..=512), rng.gen_range(1..=512));
        let (y, yp) = (random_cloud(&mut rng, n), random_cloud(&mut rng, m));
        let one_way = |from: &PointCloud, to: &PointCloud| -> f64 {
            from.points()
                .iter()
                .map(|p| to.points().iter().map(|q| dist(p, q).powi(2)).fold(f64::INFINITY, f64::min))
                .sum()
        };
        let oracle = one_way(&yp, &y) + one_way(&y, &yp);
        let cd = chamfer_distance(&y, &yp);
        worst = worst.max((cd - oracle).abs());
        identity_ok &= pc_to_pc_error_total(&yp, &y) + pc_to_pc_error_total(&y, &yp) == cd;
    }
    check(
        worst <= 1e-9 && identity_ok,
        format!("max |CD - oracle| = {worst:.2e}, directional sums equal CD exactly: {identity_ok}"),
    )
}

fn criterion_3() -> Outcome {
    let pc = |pts: &[Point]| PointCloud::new(pts.to_vec()).unwrap();
    let cd1 = chamfer_distance(&pc(&[[0.0; 3]]), &pc(&[[1.0, 0.0, 0.0]]));
    let cd2 = chamfer_distance(&pc(&[[0.0; 3], [2.0, 0.0, 0.0]]), &pc(&[[1.0, 0.0, 0.0]]));
    let emd = emd_exact(&pc(&[[0.0; 3], [1.0, 0.0, 0.0]]), &pc(&[[0.0, 1.0, 0.0], [1.0, 1.0, 0.0]])).unwrap().value;
    check(cd1 == 2.0 && cd2 == 3.0 && emd == 2.0, format!("CD {cd1}, CD {cd2}, EMD {emd}"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let g = TreeGenerator::<f32>::new(GeneratorConfig::default(), &mut rng).unwrap();
    let z: Vec<f64> = (0..96).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let tape = Tape::new();
    let bound = g.params.bind(&tape, false);
    let out = g.forward(&bound, tape.constant(Tensor::from_vec([1, 96], z.iter().map(|&v| v as f32).collect())));
    let shape = out.unwrap().shape();
    let mut bad = GeneratorConfig::default();
    bad.points = 2000;
    let rejected = TreeGenerator::<f32>::new(bad, &mut rng).is_err();
    let mut bad = GeneratorConfig::with_layers(vec![2, 4], vec![96, 8, 3]);
    bad.points = 16;
    let rejected_toy = TreeGenerator::<f32>::new(bad, &mut rng).is_err();
    check(
        shape == [2048, 3] && rejected && rejected_toy,
        format!("default output {shape:?}; mismatched products rejected: {}", rejected && rejected_toy),
    )
}

/// One point at a time: loop term through K supports, the sum of mapped
/// ancestor features, bias, activation.
fn dense_gcn(
    state: &Tensor<f64>,
    history: &[Tensor<f64>],
    degrees: &[usize],
    p: &GcnLayerParams<Tensor<f64>>,
    slope: f64,
    activation: Activation,
) -> Vec<Vec<f64>> {
    let leaky = |v: f64, s: f64| if v > 0.0 { v } else { s * v };
    let vecmat = |x: &[f64], m: &Tensor<f64>| -> Vec<f64> {
        (0..m.cols()).map(|c| (0..m.rows()).map(|r| x[r] * m.at(r, c)).sum()).collect()
    };
    let depth = history.len();
    (0..state.rows())
        .map(|i| {
            let hidden: Vec<f64> = vecmat(state.row(i), &p.loop_in).into_iter().map(|v| leaky(v, slope)).collect();
            let mut out = vecmat(&hidden, &p.loop_out);
            for j in 0..depth {
                let stride: usize = degrees[j..depth].iter().product();
                let anc = vecmat(history[j].row(i / stride), &p.ancestor_maps[j]);
                out.iter_mut().zip(anc).for_each(|(o, a)| *o += a);
            }
            out.iter_mut().zip(p.bias.data()).for_each(|(o, b)| *o += b);
            match activation {
                Activation::Leaky(s) => out.into_iter().map(|v| leaky(v, s)).collect(),
                Activation::Identity => out,
            }
        })
        .collect()
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let depth = rng.gen_range(1..=3);
        let degrees: Vec<usize> = (0..depth).map(|_| rng.gen_range(1..=3)).collect();
        let widths: Vec<usize> = (0..=depth).map(|_| rng.gen_range(1..=5)).collect();
        let k = rng.gen_range(1..=3);
        let slope = rng.gen_range(0.0..0.5);
        let activation = if rng.gen_bool(0.5) { Activation::Leaky(slope) } else { Activation::Identity };

        let mut topo = TreeTopology::root();
        let mut history = Vec::new();
        let mut rows = 1;
        for j in 0..depth {
            history.push(rand_tensor(&mut rng, rows, widths[j]));
            topo = topo.branched(degrees[j]);
            rows *= degrees[j];
        }
        let (w_in, w_out) = (widths[depth - 1], widths[depth]);
        let state = rand_tensor(&mut rng, rows, w_in);
        let params = GcnLayerParams {
            loop_in: rand_tensor(&mut rng, w_in, k * w_in),
            loop_out: rand_tensor(&mut rng, k * w_in, w_out),
            ancestor_maps: (0..depth).map(|j| rand_tensor(&mut rng, widths[j], w_out)).collect(),
            bias: Tensor::from_vec([w_out], (0..w_out).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            branch_map: None,
        };
        let hist_states: Vec<LayerState<f64>> = history
            .iter()
            .enumerate()
            .map(|(j, f)| LayerState { features: f.clone(), layer_index: j })
            .collect();
        let got = gcn_block(
            &LayerState { features: state.clone(), layer_index: depth },
            &hist_states,
            &topo,
            &params,
            slope,
            activation,
        )
        .unwrap();
        let want = dense_gcn(&state, &history, &degrees, &params, slope, activation);
        for (i, row) in want.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                worst = worst.max((got.features.at(i, c) - v).abs());
            }
        }
    }
    check(worst <= 1e-12, format!("max deviation over 100 instances = {worst:.2e}"))
}

fn criterion_6() -> Outcome {
    // (a) generator parameters through the Chamfer loss.
    let config = GeneratorConfig::with_layers(vec![2, 4], vec![96, 8, 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let g = TreeGenerator::<f64>::new(config, &mut rng).unwrap();
    let z: Vec<f64> = (0..96).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let target = random_cloud(&mut rng, 8);
    let tape = Tape::new();
    let bound = g.params.bind(&tape, true);
    let out = g.forward(&bound, tape.constant(Tensor::from_vec([1, 96], z.clone()))).unwrap();
    let generated: Vec<Point> = (0..8).map(|i| std::array::from_fn(|k| out.value().at(i, k))).collect();
    let (cd, jac) = chamfer_with_gradient(&generated, target.points());
    let loss = out.frozen_scalar(cd, Tensor::from_vec([8, 3], jac));
    let leaves: Vec<_> = bound.leaves().into_iter().copied().collect();
    let analytic: Vec<f64> = tape.grad(loss, &leaves, false).iter().flat_map(|v| v.value().data().to_vec()).collect();
    let flat: Vec<f64> = g.params.leaves().iter().flat_map(|t| t.data().to_vec()).collect();
    let numeric = central_gradient(&flat, 1e-6, |x| {
        let mut p = g.params.clone();
        let mut k = 0;
        p.visit_mut("", &mut |_, t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&x[k..k + n]);
            k += n;
        });
        let gen = TreeGenerator::from_params(g.config().clone(), p).unwrap();
        chamfer_distance(&target, &gen.generate(&z).unwrap())
    });
    let within = analytic.iter().zip(&numeric).filter(|(a, n)| relative_error(**a, **n) <= 1e-4).count();
    let frac_a = within as f64 / analytic.len() as f64;

    // (b) KL in the mean and log standard deviation.
    let mean: Vec<f64> = (0..96).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let log_std: Vec<f64> = (0..96).map(|_| rng.gen_range(-1.5..1.0)).collect();
    let tape = Tape::new();
    let (m, h) = (
        tape.variable(Tensor::from_vec([1, 96], mean.clone())),
        tape.variable(Tensor::from_vec([1, 96], log_std.clone())),
    );
    let grads = tape.grad(kl_divergence_var(m, h), &[m, h], false);
    let analytic_kl: Vec<f64> = grads.iter().flat_map(|v| v.value().data().to_vec()).collect();
    let x0: Vec<f64> = mean.iter().chain(&log_std).copied().collect();
    let numeric_kl = central_gradient(&x0, 1e-5, |x| {
        let post = GaussianPosterior::new(x[..96].to_vec(), x[96..].iter().map(|v| v.exp()).collect()).unwrap();
        kl_divergence(&post)
    });
    let worst_kl = analytic_kl.iter().zip(&numeric_kl).map(|(a, n)| relative_error(*a, *n)).fold(0.0, f64::max);

    // (c) norm of the critic's input gradient at an interpolate.
    let critic_cfg = CriticConfig {
        point_widths: vec![3, 16, 32],
        head_widths: vec![32, 16, 1],
        leaky_slope: 0.2,
    };
    let critic = PointCritic::<f64>::new(critic_cfg, &mut rng).unwrap();
    let real = stack_clouds(&[&random_cloud(&mut rng, 12)]).unwrap();
    let fake = stack_clouds(&[&random_cloud(&mut rng, 12)]).unwrap();
    let x_hat = interpolate(&real, &fake, &[0.42]);
    let tape = Tape::new();
    let bound = critic.bind(&tape, false);
    let x = tape.variable(x_hat.clone());
    let score = critic.forward(&bound, x, 12).sum();
    let g_in = tape.grad(score, &[x], false)[0].value();
    let analytic_norm = g_in.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let numeric_in = central_gradient(x_hat.data(), 1e-6, |v| {
        let tape = Tape::new();
        let b = critic.bind(&tape, false);
        critic.forward(&b, tape.constant(Tensor::from_vec([12, 3], v.to_vec())), 12).value().item()
    });
    let numeric_norm = numeric_in.iter().map(|v| v * v).sum::<f64>().sqrt();
    let err_c = relative_error(analytic_norm, numeric_norm);

    check(
        frac_a >= 0.99 && worst_kl <= 1e-6 && err_c <= 1e-4,
        format!(
            "(a) {:.2}% of {} parameters within 1e-4; (b) max KL rel err {worst_kl:.2e}; (c) norm rel err {err_c:.2e}",
            100.0 * frac_a,
            analytic.len()
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let n = 6;
    let w: Vec<f64> = (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let scale = 3.0 / w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let critic = LinearCritic::new(Tensor::from_vec([n, 3], w.iter().map(|v| v * scale).collect()), 0.0);
    let clouds = stack_clouds(&[&random_cloud(&mut rng, n), &random_cloud(&mut rng, n)]).unwrap();
    let d = loss_d(&critic, &clouds, &clouds, &[0.3, 0.7], 10.0, n).unwrap();
    let contribution = d.total - d.wasserstein;
    check((contribution - 40.0).abs() <= 1e-6, format!("penalty contribution {contribution}"))
}

fn criterion_8() -> Outcome {
    let cfg = TrainConfig::default();
    let (first, last) = (lambda2_at(0, &cfg), lambda2_at(cfg.epochs - 1, &cfg));
    check(first == 0.1 && last == 1.0, format!("lambda2(0) = {first}, lambda2({}) = {last}", cfg.epochs - 1))
}

fn toy_dataset_options() -> DatasetOptions {
    DatasetOptions {
        subjects: 64,
        point_count: 256,
        seed: 2024,
        ..DatasetOptions::default()
    }
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn criterion_11(a: &Path, b: &Path) -> Outcome {
    build_dataset(&toy_dataset_options(), a).unwrap();
    build_dataset(&toy_dataset_options(), b).unwrap();
    let (fa, fb) = (files_under(a), files_under(b));
    let same_names = fa.iter().map(|p| p.strip_prefix(a).unwrap()).eq(fb.iter().map(|p| p.strip_prefix(b).unwrap()));
    let identical = same_names && fa.iter().zip(&fb).all(|(x, y)| std::fs::read(x).unwrap() == std::fs::read(y).unwrap());
    let (mut plys, mut pgms, mut bad) = (0, 0, Vec::new());
    for p in &fa {
        match p.extension().and_then(|e| e.to_str()) {
            Some("ply") => {
                plys += 1;
                if !read_ply(p).is_ok_and(|pc| pc.len() == 256) {
                    bad.push(p.display().to_string());
                }
            }
            Some("pgm") => {
                pgms += 1;
                let bytes = std::fs::read(p).unwrap();
                let ok = bytes.starts_with(b"P5")
                    && decode_pgm(&bytes, "slice").is_ok_and(|img| {
                        img.maxval == 65535
                            && img.samples.iter().min() == Some(&0)
                            && img.samples.iter().max() == Some(&65535)
                    });
                if !ok {
                    bad.push(p.display().to_string());
                }
            }
            _ => {}
        }
    }
    check(
        identical && bad.is_empty() && plys == 64 && pgms == 192,
        format!("byte-identical: {identical}; {plys} PLY and {pgms} PGM files checked, {} invalid", bad.len()),
    )
}

fn toy_model() -> ModelConfig {
    ModelConfig {
        // Four branching stages as specified; the last degree is 8 rather
        // than 4 so the product matches the 256-point clouds.
        generator: GeneratorConfig::with_layers(vec![2, 2, 8, 8], vec![96, 64, 64, 32, 3]),
        encoder: EncoderConfig {
            input_height: 48,
            input_width: 56,
            stage_widths: vec![8, 16, 32, 64],
        },
        critic: CriticConfig {
            point_widths: vec![3, 32, 64, 128],
            head_widths: vec![128, 64, 1],
            leaky_slope: 0.2,
        },
    }
}

fn toy_train(adversarial: bool) -> TrainConfig {
    TrainConfig {
        epochs: 300,
        batch_size: 16,
        critic_steps_per_gen_step: 1,
        checkpoint_every: 0,
        probe_size: usize::MAX,
        seed: 7,
        adversarial,
        ..TrainConfig::default()
    }
}

struct Run {
    state: TrainState<f32>,
    log: String,
    secs: f64,
}

fn toy_run(manifest: &DatasetManifest, out: &Path, adversarial: bool) -> Run {
    let started = Instant::now();
    let mut state: TrainState<f32> = TrainState::new(&toy_model(), toy_train(adversarial)).unwrap();
    let data = TrainingData::from_manifest(manifest, &state.model, &state.config).unwrap();
    train(&mut state, &data, out, None).unwrap();
    let secs = started.elapsed().as_secs_f64();
    Run {
        log: std::fs::read_to_string(out.join(METRICS_FILE)).unwrap(),
        state,
        secs,
    }
}

/// Log lines with the wall-clock field removed.
fn losses(log: &str) -> Vec<serde_json::Value> {
    log.lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

fn criterion_9(first: &Run, second: &Run) -> Outcome {
    let h = &first.state.history;
    let (start, end) = (h[0].probe_cd, h[h.len() - 1].probe_cd);
    let deterministic = losses(&first.log) == losses(&second.log) && !first.log.is_empty();
    check(
        end <= 0.5 * start && first.secs <= 1800.0 && deterministic,
        format!(
            "held-out CD {start:.4} after epoch 1, {end:.4} after epoch {} (ratio {:.3}); {:.0} s; identical logs: {deterministic}",
            h.len(),
            end / start,
            first.secs
        ),
    )
}

fn criterion_10(manifest: &DatasetManifest, full: &Path, ablated: &Path) -> Outcome {
    use bpcgen::training::load_model;
    let opts = EvalOptions::default();
    let boxes = default_regions();
    let full_model = load_model::<f32>(full.join(CHECKPOINT_FILE)).unwrap();
    let ablated_model = load_model::<f32>(ablated.join(CHECKPOINT_FILE)).unwrap();
    let mut report = evaluate(&full_model, manifest, &boxes, &opts, "full").unwrap().report;
    let other = evaluate(&ablated_model, manifest, &boxes, &opts, "without D").unwrap().report;
    report.add_comparison(&other);
    let text = report.text();
    println!("{text}");
    let json = serde_json::to_value(&report).unwrap();
    let both = json["aggregates"]["mean_cd"].as_f64() == Some(report.aggregates.mean_cd)
        && json["comparisons"][0]["mean_cd"].as_f64() == Some(other.aggregates.mean_cd)
        && text.lines().any(|l| l.starts_with("full"))
        && text.lines().any(|l| l.starts_with("without D"));
    let detail = format!(
        "test CD full {:.4} vs without D {:.4} (EMD per point {:.4} vs {:.4}); published table values not reproducible without the clinical data",
        report.aggregates.mean_cd,
        other.aggregates.mean_cd,
        report.aggregates.mean_emd_per_point,
        other.aggregates.mean_emd_per_point
    );
    if both {
        Outcome::Reported(detail)
    } else {
        Outcome::Fail(format!("{detail}; report is missing a row"))
    }
}

fn report(n: usize, outcome: Outcome, failures: &mut Vec<usize>) {
    match outcome {
        Outcome::Pass(d) => println!("criterion {n:>2}: PASS      {d}"),
        Outcome::Reported(d) => println!("criterion {n:>2}: REPORTED  {d}"),
        Outcome::Fail(d) => {
            println!("criterion {n:>2}: FAIL      {d}");
            failures.push(n);
        }
    }
}

fn main() -> ExitCode {
    let mut failures = Vec::new();
    let fast: [(usize, fn() -> Outcome); 8] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
    ];
    for (n, f) in fast {
        report(n, f(), &mut failures);
    }

    let dir = tempfile::tempdir().unwrap();
    let (data_a, data_b) = (dir.path().join("data_a"), dir.path().join("data_b"));
    let c11 = criterion_11(&data_a, &data_b);

    let manifest = DatasetManifest::load(&data_a).unwrap();
    let (run_a, run_b, run_c) = (dir.path().join("run_a"), dir.path().join("run_b"), dir.path().join("run_ablated"));
    let first = toy_run(&manifest, &run_a, true);
    let second = toy_run(&manifest, &run_b, true);
    report(9, criterion_9(&first, &second), &mut failures);
    toy_run(&manifest, &run_c, false);
    report(10, criterion_10(&manifest, &run_a, &run_c), &mut failures);
    report(11, c11, &mut failures);

    if failures.is_empty() {
        println!("acceptance: all gating criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {failures:?}");
        ExitCode::FAILURE
    }
}
