//! End-to-end tests of the command-line binary: artifact layout, config
//! echo, determinism of logs, and the documented failure modes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cvmim")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    fs::write(
        &path,
        r#"{
  "dataset": {"classes": 4, "sequences_per_class": 6, "frames": 24, "views": 4, "seed": 1},
  "net": {"h": 32, "d": 8, "h_q": 32, "h_d": 32, "h_f": 32, "m": 16},
  "train": {"batch": 16, "iterations": 20, "seed": 0},
  "downstream": {"iterations": 30},
  "checkpoint_every": 10
}"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn train_writes_config_log_and_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("run");
    let res = run(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("config.json").exists());
    assert!(out.join("checkpoint/manifest.json").exists());
    assert!(out.join("checkpoint/params.bin").exists());
    let log = fs::read_to_string(out.join("train.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 20);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["e_loss"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn identical_seed_produces_identical_logs_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    for out in [&out_a, &out_b] {
        let res = run(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    assert_eq!(
        fs::read(out_a.join("train.log.jsonl")).unwrap(),
        fs::read(out_b.join("train.log.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(out_a.join("checkpoint/params.bin")).unwrap(),
        fs::read(out_b.join("checkpoint/params.bin")).unwrap()
    );
    assert_eq!(
        fs::read(out_a.join("checkpoint/manifest.json")).unwrap(),
        fs::read(out_b.join("checkpoint/manifest.json")).unwrap()
    );
}

#[test]
fn eval_emits_results_json_and_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("run");
    assert!(run(&["train", "--config", &cfg, "--out", out.to_str().unwrap()])
        .status
        .success());
    let eval_out = tmp.path().join("eval");
    let ckpt = out.join("checkpoint");
    let res = run(&[
        "eval",
        "--config",
        &cfg,
        "--out",
        eval_out.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_out.join("results.json")).unwrap()).unwrap();
    assert!(json["single_shot"]["grand_avg"].as_f64().unwrap().is_finite());
    assert_eq!(json["fully_supervised_per_view"].as_array().unwrap().len(), 4);
    let csv = fs::read_to_string(eval_out.join("results.csv")).unwrap();
    assert!(csv.starts_with("protocol,train_view,test_view,accuracy\n"));
    // 4 fully-supervised rows + 4x4 single-shot rows + header
    assert_eq!(csv.lines().count(), 1 + 4 + 16);
}

#[test]
fn nonempty_out_dir_is_refused_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("occupied");
    fs::create_dir(&out).unwrap();
    fs::write(out.join("keep.txt"), "x").unwrap();
    let res = run(&["gen-data", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("--force"));
    let res = run(&[
        "gen-data",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--force",
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("config.json").exists());
}

#[test]
fn missing_checkpoint_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let res = run(&[
        "eval",
        "--config",
        &cfg,
        "--out",
        tmp.path().join("eval").to_str().unwrap(),
        "--checkpoint",
        tmp.path().join("nope").to_str().unwrap(),
    ]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("checkpoint not found"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    fs::write(&path, r#"{"trian": {"batch": 16}}"#).unwrap();
    let res = run(&[
        "gen-data",
        "--config",
        path.to_str().unwrap(),
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("trian"));
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("seeded");
    let res = run(&[
        "gen-data",
        "--config",
        &cfg,
        "--seed",
        "9",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    let echoed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["train"]["seed"], 9);
    assert_eq!(echoed["dataset"]["seed"], 10);
}

#[test]
fn oracle_subcommand_exits_zero() {
    let res = run(&["oracle", "--trials", "100"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = String::from_utf8_lossy(&res.stdout);
    assert!(text.contains("prop1_max_residual"));
}
