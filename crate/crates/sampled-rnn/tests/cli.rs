mod common;

use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sampled-rnn")).args(args).output().unwrap()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.json");
    std::fs::write(&path, common::small_vdp(None).to_json()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn evaluate_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let o = run(&["evaluate", "--config", &cfg, "--seeds", "0,2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("summary.json").is_file());
    assert!(out.join("seed_2").join("model.json").is_file());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("seed")).count(), 2);
}

#[test]
fn fit_then_predict_and_diagnose_a_saved_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("fit");
    let out_s = out.to_str().unwrap();
    assert!(run(&["fit", "--config", &cfg, "--seed", "1", "--out", out_s]).status.success());
    let model = out.join("seed_1").join("model.json");
    assert!(model.is_file());

    let pred = dir.path().join("pred");
    let o = run(&["predict", "--config", &cfg, "--model", model.to_str().unwrap(), "--out", pred.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(pred.join("prediction.csv").is_file());

    let diag = dir.path().join("diag");
    let o = run(&["diagnose", "--config", &cfg, "--model", model.to_str().unwrap(), "--out", diag.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["eigenvalues.csv", "pairs.csv", "diagnostics.json"] {
        assert!(diag.join(f).is_file(), "{f}");
    }
}

#[test]
fn generate_writes_csv_with_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("data");
    let o = run(&["generate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["train.csv", "train.meta.json", "test.csv", "test.meta.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn failures_exit_nonzero_with_a_stage_tag() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let o = run(&["evaluate", "--config", missing.to_str().unwrap()]);
    assert!(!o.status.success());
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.starts_with("error: [config]"), "{stderr}");

    let cfg = small_config(dir.path());
    let o = run(&["control", "--config", &cfg, "--out", dir.path().join("c").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("[config]"));

    let o = run(&["ablate", "--config", &cfg, "--axis", "colour"]);
    assert!(!o.status.success());
}

#[test]
fn ingest_reports_split_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("time,value\n");
    for r in 0..50 {
        text.push_str(&format!("2020-01-{:02} {:02}:00:00,{}\n", 1 + r / 24, r % 24, r));
    }
    std::fs::write(dir.path().join("series.csv"), text).unwrap();
    let cfg = serde_json::json!({
        "name": "toy_series",
        "data": {
            "source": "csv", "path": "series.csv", "time_column": "time",
            "value_columns": ["value"], "time_features": ["hour"]
        },
        "embedding": { "delays": 2 },
        "model": { "width": 8, "activation": "tanh", "rcond": 1e-8 },
        "evaluation": { "metric": "mse", "chunk_horizon": 2 },
        "seeds": [0]
    });
    let cfg_path = dir.path().join("toy.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let out = dir.path().join("ingested");
    let o = run(&["ingest", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("train 0..35"), "{stdout}");
    assert!(stdout.contains("test 45..50"), "{stdout}");
    assert!(out.join("validation.csv").is_file());

    let o = run(&["evaluate", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
