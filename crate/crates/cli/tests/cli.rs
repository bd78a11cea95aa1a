use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn pdzdpg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdzdpg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn train_then_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fs::read_to_string(configs().join("awgn10.json"))
        .unwrap()
        .replace("100000", "1000")
        .replace("\"n_mc\": 1000000", "\"n_mc\": 2000");
    let cfg_path = dir.path().join("small.json");
    fs::write(&cfg_path, cfg).unwrap();
    let runs = dir.path().join("runs");
    let out = pdzdpg(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        runs.to_str().unwrap(),
        "--seeds",
        "0,1,2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.matches("seed ").count(), 3, "{stdout}");
    assert!(runs.join("benchmark.json").exists());
    assert!(runs.join("manifest.json").exists());

    let agg = dir.path().join("agg.csv");
    let out = pdzdpg(&[
        "aggregate",
        "--in",
        runs.to_str().unwrap(),
        "--out",
        agg.to_str().unwrap(),
        "--boot",
        "50",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&agg).unwrap();
    assert_eq!(text.lines().next().unwrap(), "iter,metric,mean,lo,hi");
}

#[test]
fn bad_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let cfg = fs::read_to_string(configs().join("mai10.json"))
        .unwrap()
        .replacen('{', "{\"typo_field\": 3,", 1);
    fs::write(&path, cfg).unwrap();
    let out = pdzdpg(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("typo_field"));
}

#[test]
fn mismatched_baseline_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("awgn10.json");
    let out = pdzdpg(&[
        "baseline",
        "--config",
        cfg.to_str().unwrap(),
        "--which",
        "wmmse",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_fast_suite_passes_and_detects_corruption() {
    let ok = pdzdpg(&["verify"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stdout));
    let bad = pdzdpg(&["verify", "--corrupt-vjp"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL vjp_gradient_check"));
}
