//! Per-iteration wall-clock comparison of the two estimators.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{
    BenchmarkConfig, ExperimentConfig, InitConfig, PolicyConfig, PolicyStructure, ProblemConfig,
    Schedules, WeightsSpec,
};
use super::experiment::build_learner;
use crate::baselines::WmmseConfig;
use crate::error::{Error, Result};
use crate::learner::{Algorithm, ObjectiveMode, SlackSpec, StepSchedule};
use crate::policy::InitScheme;
use crate::smoothing::SmoothingParams;
use crate::systems::ServiceKind;

pub const TIMING_HEADER: &str = "algo,n_users,hidden,n_params,perturbation_dim,iters,median_wall_ns";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub algo: String,
    pub n_users: usize,
    pub hidden: String,
    pub n_params: usize,
    pub perturbation_dim: usize,
    pub iters: u64,
    pub median_wall_ns: u64,
}

/// MAI problem with a joint `N-hidden-N` policy and the MAI step sizes for
/// both algorithms.
pub fn mai_timing_config(n_users: usize, hidden: Vec<usize>) -> ExperimentConfig {
    ExperimentConfig {
        name: format!("mai{n_users}-timing"),
        problem: ProblemConfig {
            service: ServiceKind::Mai,
            n_users,
            p_max: 20.0,
            noise: 1.0,
            channel_rate: 0.5,
            weights: WeightsSpec::Random { seed: 2024 },
        },
        algo: Algorithm::PdZdpgPlus,
        smoothing: SmoothingParams { mu_s: 0.1, mu_r: 0.1 },
        mu_theta: None,
        slack: SlackSpec::default(),
        objective: ObjectiveMode::ExactLinear,
        schedules: Schedules {
            pdzdpg_plus: StepSchedule {
                alpha_x: 0.001,
                alpha_theta: 0.04,
                alpha_lambda_rate: 0.008,
                alpha_lambda_power: 0.0001,
                alpha_lambda_s: None,
            },
            pdzdpg: Some(StepSchedule {
                alpha_x: 0.001,
                alpha_theta: 0.00005,
                alpha_lambda_rate: 0.004,
                alpha_lambda_power: 0.0001,
                alpha_lambda_s: None,
            }),
        },
        policy: PolicyConfig {
            structure: PolicyStructure::Joint,
            hidden,
            output_scale: None,
        },
        init: InitConfig {
            theta: InitScheme::UniformFanIn { gain: 1.0 },
            x: 0.0,
            lambda: 1.0,
        },
        n_iters: 10_000,
        seeds: vec![0],
        ma_window: 1000,
        log_every: 100,
        x_rail: true,
        benchmark: BenchmarkConfig {
            n_mc: 1000,
            seed: 0,
            tol: 1e-6,
            wmmse: WmmseConfig::default(),
        },
        record_timing: true,
        checkpoint: false,
    }
}

pub fn median(values: &mut [u64]) -> u64 {
    values.sort_unstable();
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2
    }
}

/// Time `n_iters` single steps of `algo` on `cfg` (seed `seed`).
pub fn time_algorithm(
    cfg: &ExperimentConfig,
    algo: Algorithm,
    n_iters: u64,
    seed: u64,
) -> Result<TimingRow> {
    if n_iters == 0 {
        return Err(Error::invalid("iters", "must be >= 1"));
    }
    let cfg = cfg.with_algo(algo)?;
    let mut learner = build_learner(&cfg, seed)?;
    let mut samples = Vec::with_capacity(n_iters as usize);
    let mut perturbation_dim = 0;
    for _ in 0..n_iters {
        let t = Instant::now();
        let out = learner.step()?;
        samples.push(t.elapsed().as_nanos() as u64);
        perturbation_dim = out.perturbation_dim;
    }
    let hidden: Vec<String> = cfg.policy.hidden.iter().map(|h| h.to_string()).collect();
    Ok(TimingRow {
        algo: algo.name().to_owned(),
        n_users: cfg.problem.n_users,
        hidden: hidden.join("-"),
        n_params: learner.state().params.len(),
        perturbation_dim,
        iters: n_iters,
        median_wall_ns: median(&mut samples),
    })
}

pub fn write_timing(path: &Path, rows: &[TimingRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
