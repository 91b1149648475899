use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pden::config::RunConfig;
use pden::eval::MetricsRecord;

fn pden(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pden"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn pden")
}

fn tiny_config(dir: &Path, arm: &str) -> PathBuf {
    let text = format!(
        r#"{{
        "name": "tiny",
        "arm": "{arm}",
        "train": {{
            "K": 1, "t_gen": 4, "t_task": 4, "t_pretrain": 8, "batch": 4,
            "task_arch": {{"in_channels": 1, "image_size": 16, "conv_channels": [4, 4], "hidden": 8, "classes": 10, "proj_dim": 4}},
            "gen_arch": {{"in_channels": 1, "image_size": 16, "channels": [4], "noise_dim": 2}}
        }},
        "train_data": {{"kind": "toy", "classes": 10, "count": 40, "image_size": 16, "seed": 1}},
        "test_data": {{"kind": "toy", "classes": 10, "count": 40, "image_size": 16, "seed": 2}},
        "benchmark": [{{"kind": "invert", "severity": 5}}, {{"kind": "blur", "severity": 2}}],
        "fewshot": {{"shift": {{"kind": "brightness", "severity": 5}}, "shots": [1, 2], "finetune": {{"steps": 3, "lr": 0.001}}}},
        "grid_images": 4
    }}"#
    );
    let path = dir.join(format!("{arm}.json"));
    std::fs::write(&path, text).unwrap();
    path
}

fn records(path: &Path) -> Vec<MetricsRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .deserialize()
        .map(|r| r.unwrap())
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = pden(&["train", "--config", "/nonexistent/pden.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot read config"));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "pden");
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("\"batch\": 4", "\"batch\": 4, \"w_advv\": 0.1");
    std::fs::write(&cfg, text).unwrap();
    let out = pden(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("w_advv"));
}

#[test]
fn unknown_subcommand_and_arm_exit_2() {
    assert_eq!(pden(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "pden");
    assert_eq!(
        pden(&["train", "--config", s(&cfg), "--arm", "bogus"]).status.code(),
        Some(2)
    );
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.ckpt");
    std::fs::write(&ckpt, b"NOT-A-CHECKPOINT").unwrap();
    let data = r#"{"data": {"kind": "toy", "classes": 10, "count": 10, "image_size": 16, "seed": 3}}"#;
    let out = pden(&["eval", "--ckpt", s(&ckpt), "--data", data]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn train_then_eval_on_several_domains() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "pden");
    let run = dir.path().join("run");
    let out = pden(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "config.json",
        "manifest.json",
        "metrics.csv",
        "train_log.csv",
        "phases.csv",
        "features.csv",
        "checkpoints/task_pretrain.ckpt",
        "checkpoints/task_k1.ckpt",
        "checkpoints/generator_k1.ckpt",
        "checkpoints/cycle_k1.ckpt",
        "checkpoints/task_final.ckpt",
        "grids/source.pgm",
        "grids/synthetic_k1.pgm",
        "datasets/train.json",
        "datasets/test.json",
        "datasets/test_invert@5.json",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let echoed = RunConfig::load(&run.join("config.json")).unwrap();
    assert_eq!(echoed, RunConfig::load(&cfg).unwrap());

    let train_rows = records(&run.join("metrics.csv"));
    let arms: Vec<&str> = train_rows.iter().map(|r| r.arm.as_str()).collect();
    assert!(arms.contains(&"erm") && arms.contains(&"pden"));
    assert!(train_rows.iter().any(|r| r.shift_kind == "invert" && r.severity == 5));

    let spec = r#"{"data": {"kind": "toy", "classes": 10, "count": 40, "image_size": 16, "seed": 2},
                   "shifts": [{"kind": "invert", "severity": 5}, {"kind": "blur", "severity": 2}]}"#;
    let spec_path = dir.path().join("eval.json");
    std::fs::write(&spec_path, spec).unwrap();
    let eval_dir = dir.path().join("eval");
    let ckpt = run.join("checkpoints/task_final.ckpt");
    let out = pden(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&spec_path),
        "--out",
        s(&eval_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = records(&eval_dir.join("eval_metrics.csv"));
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].shift_kind, "none");

    // Same test split and shifts as the training run, so the accuracies agree.
    for r in &rows {
        let trained = train_rows
            .iter()
            .find(|t| {
                t.arm == "pden" && t.shift_kind == r.shift_kind && t.severity == r.severity && t.domain != "train"
            })
            .unwrap();
        assert_eq!(trained.accuracy, r.accuracy, "{}", r.domain);
    }
}

#[test]
fn fewshot_arm_reports_each_shot_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "fewshot");
    let run = dir.path().join("run");
    let out = pden(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let arms: Vec<String> = records(&run.join("metrics.csv")).into_iter().map(|r| r.arm).collect();
    for a in ["fewshot-0", "fewshot-1", "fewshot-2"] {
        assert!(arms.iter().any(|x| x == a), "{a} missing from {arms:?}");
    }
}

#[test]
fn sweep_keeps_requested_grid_and_drops_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "pden");
    let run = dir.path().join("sweep");
    let out = pden(&[
        "sweep",
        "--config",
        s(&cfg),
        "--out",
        s(&run),
        "--param",
        "w_adv",
        "--values",
        "0.02,0.05,0.08,0.1,0.13,0.16,0.2,0.05",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("duplicate"));
    let rows = records(&run.join("metrics.csv"));
    let mut seen: Vec<f64> = Vec::new();
    for r in rows.iter().filter(|r| r.arm == "pden") {
        if !seen.contains(&r.w_adv) {
            seen.push(r.w_adv);
        }
    }
    assert_eq!(seen, [0.02, 0.05, 0.08, 0.1, 0.13, 0.16, 0.2]);
    let text = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(text.contains(",0.13,"));

    let empty = pden(&[
        "sweep",
        "--config",
        s(&cfg),
        "--out",
        s(&run),
        "--param",
        "w_adv",
        "--values",
        "",
    ]);
    assert_eq!(empty.status.code(), Some(2));
    let bad = pden(&["sweep", "--config", s(&cfg), "--param", "lr", "--values", "1"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn gradcheck_subcommand_reports_every_case() {
    let dir = tempfile::tempdir().unwrap();
    let out = pden(&["gradcheck", "--instances", "2", "--out", s(dir.path())]);
    assert!(out.status.success());
    let report = std::fs::read_to_string(dir.path().join("gradcheck.txt")).unwrap();
    assert!(report.contains(", 0 failed,"));
    assert!(report.lines().any(|l| l.contains("loss_unseen")));
}

#[test]
fn out_dir_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "erm");
    let out = Command::new(env!("CARGO_BIN_EXE_pden"))
        .args(["train", "--config", s(&cfg)])
        .env("PDEN_OUT_DIR", dir.path().join("root"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("root/tiny/metrics.csv").is_file());
    assert!(dir.path().join("root/tiny/checkpoints/task_final.ckpt").is_file());
}
