use std::fs;
use std::path::{Path, PathBuf};

use pdzdpg::harness::aggregate::{read_aggregate, AGGREGATE_HEADER};
use pdzdpg::harness::experiment::{Manifest, BENCHMARK_FILE, MANIFEST_FILE};
use pdzdpg::harness::record::{read_run_csv, CSV_HEADER};
use pdzdpg::harness::{aggregate_dir, run_experiment, ExperimentConfig, RunStatus};

fn shipped(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(path).unwrap()
}

fn short_awgn() -> ExperimentConfig {
    let mut cfg = shipped("awgn10.json");
    cfg.n_iters = 2_000;
    cfg.ma_window = 200;
    cfg.benchmark.n_mc = 10_000;
    cfg
}

fn first_line(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_owned()
}

#[test]
fn experiment_writes_runs_benchmark_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_awgn();
    let report = run_experiment(&cfg, dir.path(), true).unwrap();
    assert!(!report.any_aborted());
    assert_eq!(report.csv_paths.len(), 5);
    for p in &report.csv_paths {
        assert_eq!(first_line(p), CSV_HEADER);
        let rows = read_run_csv(p).unwrap();
        assert_eq!(rows.len(), 20);
        assert_eq!(rows.last().unwrap().iter, 2_000);
        assert!(p.file_name().unwrap().to_str().unwrap().contains(&cfg.hash()));
    }

    let bench: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join(BENCHMARK_FILE)).unwrap()).unwrap();
    let keys: Vec<&str> = bench.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    assert_eq!(keys.len(), 4);
    for k in ["value", "stderr", "n_mc", "seed"] {
        assert!(keys.contains(&k), "missing {k}");
    }
    assert_eq!(bench["n_mc"], 10_000);

    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest.config_hash, cfg.hash());
    assert_eq!(manifest.perturbation_dim, 10);
    assert!(!manifest.diverged);
    assert!(manifest.runs.iter().all(|r| r.status == RunStatus::Completed));

    let out = dir.path().join("agg.csv");
    assert_eq!(aggregate_dir(dir.path(), &out, 200, 0.95, 0).unwrap(), 5);
    assert_eq!(first_line(&out), AGGREGATE_HEADER);

    // Independent mean over seeds at the final iteration.
    let runs: Vec<_> = report.csv_paths.iter().map(|p| read_run_csv(p).unwrap()).collect();
    let expect = runs.iter().map(|r| r.last().unwrap().ma_sumrate).sum::<f64>() / 5.0;
    let lo = runs.iter().map(|r| r.last().unwrap().ma_sumrate).fold(f64::INFINITY, f64::min);
    let hi = runs.iter().map(|r| r.last().unwrap().ma_sumrate).fold(f64::NEG_INFINITY, f64::max);
    let rows = read_aggregate(&out).unwrap();
    assert_eq!(rows.len(), 20 * 8);
    let row = rows
        .iter()
        .find(|r| r.iter == 2_000 && r.metric == "ma_sumrate")
        .unwrap();
    assert!((row.mean - expect).abs() <= 1e-12 * expect.abs());
    assert!(lo <= row.lo && row.lo <= row.mean && row.mean <= row.hi && row.hi <= hi);
}

#[test]
fn reruns_are_byte_identical() {
    let cfg = short_awgn().with_seeds(vec![3, 4]).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_experiment(&cfg, a.path(), false).unwrap();
    let rb = run_experiment(&cfg, b.path(), false).unwrap();
    for (pa, pb) in ra.csv_paths.iter().zip(&rb.csv_paths) {
        assert_eq!(fs::read(pa).unwrap(), fs::read(pb).unwrap());
    }
    assert!(!a.path().join(BENCHMARK_FILE).exists());
}

#[test]
fn aggregation_refuses_mixed_configs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = short_awgn().with_seeds(vec![0, 1]).unwrap();
    cfg.n_iters = 300;
    run_experiment(&cfg, dir.path(), false).unwrap();
    cfg.smoothing.mu_r = 0.2;
    run_experiment(&cfg, dir.path(), false).unwrap();
    let err = aggregate_dir(dir.path(), &dir.path().join("agg.csv"), 10, 0.95, 0).unwrap_err();
    assert!(err.to_string().contains("hash"), "{err}");
}

#[test]
fn divergence_keeps_partial_csv_and_flags_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = short_awgn().with_seeds(vec![0, 1]).unwrap();
    cfg.schedules.pdzdpg_plus.alpha_theta = 1e308;
    cfg.schedules.pdzdpg_plus.alpha_lambda_rate = 1e308;
    cfg.init.theta = pdzdpg::policy::InitScheme::UniformFanIn { gain: 1.0 };
    let report = run_experiment(&cfg, dir.path(), false).unwrap();
    assert!(report.manifest.diverged);
    for r in &report.manifest.runs {
        let RunStatus::Aborted { iter, numeric, .. } = &r.status else {
            panic!("seed {} should diverge", r.seed)
        };
        assert!(*numeric);
        assert!(*iter < 2_000);
        let rows = read_run_csv(dir.path().join(&r.csv)).unwrap();
        assert!(rows.iter().all(|x| x.is_finite() && x.iter < *iter));
    }
}

#[test]
fn unknown_config_key_is_rejected() {
    let text = short_awgn().to_json_pretty().replacen('{', "{\"learning_rate\": 1.0,", 1);
    let err = ExperimentConfig::from_json(&text).unwrap_err();
    assert!(matches!(err, pdzdpg::Error::Config { .. }), "{err}");
}

#[test]
fn shipped_configs_validate() {
    for name in ["awgn10.json", "mai10.json", "mai25.json", "mai50.json"] {
        let cfg = shipped(name);
        cfg.validate().unwrap();
        assert_eq!(cfg.seeds.len(), 5, "{name}");
        assert_eq!(cfg.n_iters, 100_000, "{name}");
    }
}
