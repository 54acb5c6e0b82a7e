use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bpcgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bpcgen"))
        .args(args)
        .env_remove("BPCGEN_SEED")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Every file under `root` with its bytes, sorted by relative path.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const TINY_CONFIG: &str = r#"{
  "model": {
    "generator": {"points": 8, "degrees": [2, 4], "widths": [96, 8, 3], "support_count": 2},
    "encoder": {"input_height": 16, "input_width": 16, "stage_widths": [4, 8]},
    "critic": {"point_widths": [3, 8, 16], "head_widths": [16, 8, 1]}
  },
  "train": {"epochs": 2, "batch_size": 2, "critic_steps_per_gen_step": 1, "learning_rate": 0.001, "probe_size": 2},
  "eval": {"modality": "axial"}
}"#;

#[test]
fn metrics_on_identical_files_are_zero() {
    let dir = tempfile::tempdir().unwrap();
    let ply = dir.path().join("a.ply");
    std::fs::write(&ply, "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 0 0\n0 2 1\n").unwrap();
    let o = bpcgen(&["metrics", s(&ply), s(&ply)]);
    assert!(o.status.success(), "{o:?}");
    let text = stdout(&o);
    assert!(text.lines().any(|l| l == "CD 0"), "{text}");
    assert!(text.lines().any(|l| l.starts_with("EMD 0 ")), "{text}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = bpcgen(&["metrics", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert!(o.stdout.is_empty());
}

#[test]
fn missing_input_is_a_failure() {
    let o = bpcgen(&["metrics", "/nonexistent/a.ply", "/nonexistent/b.ply"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_exits_cleanly() {
    let o = bpcgen(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for cmd in ["synth-data", "train", "eval", "infer", "export-ply", "metrics"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn synth_data_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = bpcgen(&["synth-data", "--subjects", "10", "--points", "64", "--seed", "7", "--out", s(out)]);
        assert!(o.status.success(), "{o:?}");
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 10 * 4 + 1);
    assert!(ta == tb, "trees differ");

    // The environment seed stands in for --seed.
    let c = dir.path().join("c");
    let o = Command::new(env!("CARGO_BIN_EXE_bpcgen"))
        .args(["synth-data", "--subjects", "10", "--points", "64", "--out", s(&c)])
        .env("BPCGEN_SEED", "7")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(tree(&c) == ta);

    // A populated directory is not overwritten silently.
    let o = bpcgen(&["synth-data", "--subjects", "10", "--seed", "7", "--out", s(&a)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_eval_infer_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("run.json");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let data = root.join("data");
    let run = root.join("run");
    let o = bpcgen(&["synth-data", "--subjects", "6", "--points", "8", "--train-fraction", "0.67", "--seed", "3", "--out", s(&data)]);
    assert!(o.status.success(), "{o:?}");

    let o = bpcgen(&["train", "--config", s(&config), "--dataset", s(&data), "--out", s(&run), "--seed", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = run.join("checkpoint.bpc");
    assert!(ckpt.is_file());
    let log = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert!(!log.is_empty());
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "step", "loss_d", "loss_eg", "kl", "cd", "lambda2", "wall_ms"] {
            assert!(v.get(key).is_some(), "{key} missing from {line}");
        }
    }

    // Starting over in a used directory needs --resume.
    let o = bpcgen(&["train", "--config", s(&config), "--dataset", s(&data), "--out", s(&run)]);
    assert_eq!(o.status.code(), Some(2));
    let o = bpcgen(&["train", "--config", s(&config), "--dataset", s(&data), "--out", s(&run), "--resume", "--epochs", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("epoch 3"));

    let eval_dir = root.join("eval");
    let o = bpcgen(&[
        "eval", "--config", s(&config), "--checkpoint", s(&ckpt), "--dataset", s(&data), "--out", s(&eval_dir),
        "--baseline", s(&ckpt),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    for key in ["label", "per_subject", "region_table", "aggregates", "comparisons"] {
        assert!(report.get(key).is_some(), "{key} missing");
    }
    let subjects = report["per_subject"].as_array().unwrap();
    assert_eq!(subjects.len(), 2);
    for row in subjects {
        for key in ["id", "cd", "emd", "pc2pc_total_mean", "regions"] {
            assert!(row.get(key).is_some(), "{key} missing");
        }
        assert_eq!(row["emd"]["method"], "exact_assignment");
    }
    assert_eq!(report["region_table"]["scale_tag"], "×10⁻⁴");
    assert_eq!(report["aggregates"]["emd_scale_tag"], "×10⁻¹");
    assert_eq!(report["comparisons"][0]["label"], "without D");
    let text = std::fs::read_to_string(eval_dir.join("report.txt")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header[..2], ["Area", "full"]);
    assert!(text.lines().any(|l| l.starts_with("Total")));
    assert!(text.lines().any(|l| l.starts_with("without D")));
    assert_eq!(stdout(&o), text);
    for row in subjects {
        assert!(eval_dir.join("reconstructions").join(format!("{}.ply", row["id"].as_str().unwrap())).is_file());
    }

    let slice = data.join("subject_000").join("axial.pgm");
    let outs: Vec<PathBuf> = (0..2).map(|i| root.join(format!("infer{i}.ply"))).collect();
    for out in &outs {
        let o = bpcgen(&["infer", "--checkpoint", s(&ckpt), "--slice", s(&slice), "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&outs[0]).unwrap(), std::fs::read(&outs[1]).unwrap());
    let sampled = root.join("sampled.ply");
    let o = bpcgen(&["infer", "--checkpoint", s(&ckpt), "--slice", s(&slice), "--out", s(&sampled), "--sample", "--seed", "5"]);
    assert!(o.status.success());
    assert_ne!(std::fs::read(&outs[0]).unwrap(), std::fs::read(&sampled).unwrap());

    let colored = root.join("colored.ply");
    let target = data.join("subject_000").join("cloud.ply");
    let o = bpcgen(&["export-ply", s(&outs[0]), s(&target), "--out", s(&colored)]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&colored).unwrap();
    assert!(text.contains("property uchar red\n"));
}
