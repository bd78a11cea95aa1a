//! Building learners from a config and running every seed to CSV.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, PolicyStructure};
use super::record::{CsvSink, RunRecord};
use crate::baselines::{waterfill_clairvoyant, wmmse_ergodic, BenchmarkResult};
use crate::error::{Error, Result};
use crate::learner::{Algorithm, Learner, LearnerConfig, LearnerState, Utility};
use crate::policy::{CompositePolicy, MlpSpec, PolicyParams};
use crate::rng::{stream, Stream};
use crate::smoothing::BoxSet;
use crate::systems::{Problem, ServiceKind, System};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BENCHMARK_FILE: &str = "benchmark.json";

pub fn csv_name(seed: u64, hash: &str) -> String {
    format!("seed{seed}-{hash}.csv")
}

/// Inverse of [`csv_name`]: `(seed, hash)`.
pub fn parse_csv_name(name: &str) -> Option<(u64, String)> {
    let stem = name.strip_prefix("seed")?.strip_suffix(".csv")?;
    let (seed, hash) = stem.split_once('-')?;
    Some((seed.parse().ok()?, hash.to_owned()))
}

pub fn build_problem(cfg: &ExperimentConfig) -> Result<Problem> {
    Problem::new(cfg.service_spec()?, cfg.channel_dist()?)
}

pub fn build_policy(cfg: &ExperimentConfig) -> Result<Arc<CompositePolicy>> {
    let n = cfg.problem.n_users;
    let arch = match cfg.policy.structure {
        PolicyStructure::PerUser => {
            let mut sizes = vec![1];
            sizes.extend(&cfg.policy.hidden);
            sizes.push(1);
            CompositePolicy::per_user(MlpSpec::new(sizes, cfg.output_scale())?, n)?
        }
        PolicyStructure::Joint => {
            let mut sizes = vec![n];
            sizes.extend(&cfg.policy.hidden);
            sizes.push(n);
            CompositePolicy::single(MlpSpec::new(sizes, cfg.output_scale())?)?
        }
    };
    Ok(Arc::new(arch))
}

pub fn initial_state(
    cfg: &ExperimentConfig,
    arch: Arc<CompositePolicy>,
    seed: u64,
) -> LearnerState {
    let n = cfg.problem.n_users;
    let params = PolicyParams::init(arch, cfg.init.theta, &mut stream(seed, Stream::Init));
    LearnerState {
        x: vec![cfg.init.x; n],
        params,
        lambda_s: Vec::new(),
        lambda_r: vec![cfg.init.lambda; n + 1],
        iter: 0,
    }
}

pub fn learner_config(cfg: &ExperimentConfig, problem: &Problem) -> Result<LearnerConfig> {
    let n = cfg.problem.n_users;
    let x_set = if cfg.x_rail {
        BoxSet::new(vec![0.0; n], problem.x_rail())?
    } else {
        BoxSet::nonneg(n)
    };
    Ok(LearnerConfig {
        algo: cfg.algo,
        smoothing: cfg.smoothing,
        mu_theta: cfg.mu_theta(),
        slack: cfg.slack.clone(),
        schedule: cfg.schedule()?,
        x_set,
    })
}

pub fn build_learner(cfg: &ExperimentConfig, seed: u64) -> Result<Learner<Problem>> {
    let problem = build_problem(cfg)?;
    let arch = build_policy(cfg)?;
    let state = initial_state(cfg, arch, seed);
    let mut utility = Utility::linear(problem.weights().to_vec());
    utility.mode = cfg.objective;
    let lc = learner_config(cfg, &problem)?;
    Learner::new(problem, utility, lc, state, stream(seed, Stream::Learning))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// `numeric` marks non-finite iterates (divergence) as opposed to I/O
    /// or other failures.
    Aborted {
        iter: u64,
        numeric: bool,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub csv: String,
    #[serde(flatten)]
    pub status: RunStatus,
    pub iters_completed: u64,
    /// Coordinate-iterations in which `x` was clipped at its rail.
    pub rail_hits: u64,
    pub last_record: Option<RunRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub config_hash: String,
    pub crate_version: String,
    pub algo: Algorithm,
    pub config: ExperimentConfig,
    pub weights: Vec<f64>,
    pub n_params: usize,
    pub perturbation_dim: usize,
    pub slack_violation_bound: Option<Vec<f64>>,
    pub benchmark: Option<BenchmarkResult>,
    pub runs: Vec<SeedSummary>,
    pub diverged: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub manifest: Manifest,
    pub out_dir: PathBuf,
    pub csv_paths: Vec<PathBuf>,
}

impl ExperimentReport {
    pub fn any_aborted(&self) -> bool {
        self.manifest
            .runs
            .iter()
            .any(|r| matches!(r.status, RunStatus::Aborted { .. }))
    }
}

/// Waterfilling for AWGN configs, WMMSE for MAI configs.
pub fn compute_benchmark(cfg: &ExperimentConfig) -> Result<BenchmarkResult> {
    let spec = cfg.service_spec()?;
    let dist = cfg.channel_dist()?;
    let b = &cfg.benchmark;
    let value = match spec.kind {
        ServiceKind::Awgn => waterfill_clairvoyant(&spec, &dist, b.n_mc, b.seed, b.tol)?.value,
        ServiceKind::Mai => wmmse_ergodic(&spec, &dist, b.n_mc, b.seed, &b.wmmse)?,
    };
    Ok(BenchmarkResult {
        value: value.value,
        stderr: value.stderr,
        n_mc: b.n_mc as u64,
        seed: b.seed,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Run one seed, logging every `log_every` iterations (and the last one)
/// to `csv_path`. Failures are reported in the summary; rows written before
/// the failure stay on disk.
pub fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    csv_path: &Path,
    checkpoint_path: Option<&Path>,
) -> SeedSummary {
    let csv = csv_path
        .file_name()
        .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let mut summary = SeedSummary {
        seed,
        csv,
        status: RunStatus::Completed,
        iters_completed: 0,
        rail_hits: 0,
        last_record: None,
        checkpoint: None,
    };
    let mut learner = match build_learner(cfg, seed) {
        Ok(l) => l,
        Err(e) => {
            summary.status = abort_status(0, &e);
            return summary;
        }
    };
    let mut sink = match CsvSink::create(csv_path) {
        Ok(s) => s,
        Err(e) => {
            summary.status = abort_status(0, &e);
            return summary;
        }
    };
    let n_iters = cfg.n_iters;
    let mut last = None;
    let result = learner.run(n_iters, seed, cfg.ma_window, cfg.record_timing, |r| {
        last = Some(*r);
        if r.iter % cfg.log_every == 0 || r.iter == n_iters {
            sink.write(r)?;
        }
        Ok(())
    });
    let flushed = sink.flush();
    summary.iters_completed = learner.state().iter;
    summary.rail_hits = learner.rail_hits();
    summary.last_record = last;
    if let Err(e) = result.and(flushed) {
        summary.status = abort_status(learner.state().iter, &e);
        return summary;
    }
    if let Some(path) = checkpoint_path {
        match learner.state().params.save_checkpoint(path) {
            Ok(()) => {
                summary.checkpoint = path.file_name().map(|n| n.to_string_lossy().into_owned())
            }
            Err(e) => summary.status = abort_status(learner.state().iter, &e),
        }
    }
    summary
}

fn abort_status(iter: u64, e: &Error) -> RunStatus {
    match e {
        Error::NonFinite { iter, .. } => RunStatus::Aborted {
            iter: *iter,
            numeric: true,
            reason: e.to_string(),
        },
        _ => RunStatus::Aborted {
            iter,
            numeric: false,
            reason: e.to_string(),
        },
    }
}

/// Run every configured seed on its own thread and write the CSVs,
/// `manifest.json` and (optionally) `benchmark.json` into `out_dir`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: impl AsRef<Path>,
    with_benchmark: bool,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref().to_path_buf();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let hash = cfg.hash();
    let problem = build_problem(cfg)?;
    let arch = build_policy(cfg)?;

    let csv_paths: Vec<PathBuf> = cfg
        .seeds
        .iter()
        .map(|&s| out_dir.join(csv_name(s, &hash)))
        .collect();
    let checkpoints: Vec<Option<PathBuf>> = cfg
        .seeds
        .iter()
        .map(|s| {
            cfg.checkpoint
                .then(|| out_dir.join(format!("seed{s}-{hash}.policy")))
        })
        .collect();
    let runs: Vec<SeedSummary> = std::thread::scope(|scope| {
        let handles: Vec<_> = cfg
            .seeds
            .iter()
            .zip(&csv_paths)
            .zip(&checkpoints)
            .map(|((&seed, path), ckpt)| {
                scope.spawn(move || run_seed(cfg, seed, path, ckpt.as_deref()))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("seed worker panicked"))
            .collect()
    });
    for r in &runs {
        if let RunStatus::Aborted { iter, reason, .. } = &r.status {
            log::warn!("seed {} aborted at iteration {iter}: {reason}", r.seed);
        }
    }

    let benchmark = if with_benchmark {
        let b = compute_benchmark(cfg)?;
        write_json(&out_dir.join(BENCHMARK_FILE), &b)?;
        Some(b)
    } else {
        None
    };

    let perturbation_dim = match cfg.algo {
        Algorithm::PdZdpgPlus => arch.action_dim(),
        Algorithm::PdZdpg => arch.n_params(),
    };
    let manifest = Manifest {
        name: cfg.name.clone(),
        config_hash: hash,
        crate_version: env!("CARGO_PKG_VERSION").to_owned(),
        algo: cfg.algo,
        config: cfg.clone(),
        weights: problem.spec.weights.clone(),
        n_params: arch.n_params(),
        perturbation_dim,
        slack_violation_bound: cfg.slack.violation_bound(cfg.smoothing.mu_r, arch.action_dim()),
        benchmark,
        diverged: runs
            .iter()
            .any(|r| matches!(r.status, RunStatus::Aborted { numeric: true, .. })),
        runs,
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(ExperimentReport {
        manifest,
        out_dir,
        csv_paths,
    })
}
