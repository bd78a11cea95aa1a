//! Experiment configuration files (JSON).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::WmmseConfig;
use crate::error::{Error, Result};
use crate::learner::{Algorithm, ObjectiveMode, SlackSpec, StepSchedule};
use crate::policy::InitScheme;
use crate::rng::{stream, Stream};
use crate::smoothing::SmoothingParams;
use crate::systems::{random_weights, ChannelDist, ServiceKind, ServiceSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub problem: ProblemConfig,
    pub algo: Algorithm,
    /// `mu_r` and `mu_s` both default to 0.1 (half a percent of the
    /// `[0, 20]` action range). Tune `mu_r` per problem.
    #[serde(default = "default_smoothing")]
    pub smoothing: SmoothingParams,
    /// Parameter-space radius for the `pdzdpg` baseline; defaults to `mu_r`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_theta: Option<f64>,
    #[serde(default)]
    pub slack: SlackSpec,
    #[serde(default)]
    pub objective: ObjectiveMode,
    pub schedules: Schedules,
    pub policy: PolicyConfig,
    pub init: InitConfig,
    pub n_iters: u64,
    pub seeds: Vec<u64>,
    #[serde(default = "default_ma_window")]
    pub ma_window: usize,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    /// Cap `x` at ten times the full-power mean-channel rate.
    #[serde(default = "default_true")]
    pub x_rail: bool,
    pub benchmark: BenchmarkConfig,
    /// Measure per-iteration wall time. Off by default because timings
    /// make the CSVs irreproducible.
    #[serde(default)]
    pub record_timing: bool,
    /// Write the final policy parameters of every seed.
    #[serde(default)]
    pub checkpoint: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub service: ServiceKind,
    pub n_users: usize,
    pub p_max: f64,
    pub noise: f64,
    /// Rate of the i.i.d. exponential channel gains (mean `1 / rate`).
    pub channel_rate: f64,
    pub weights: WeightsSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightsSpec {
    Uniform,
    /// Uniform draws normalized to one, from the weights stream of `seed`.
    Random { seed: u64 },
    Explicit { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedules {
    pub pdzdpg_plus: StepSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pdzdpg: Option<StepSchedule>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyStructure {
    /// One independent `1-hidden-1` network per user, fed its own gain.
    PerUser,
    /// One `N-hidden-N` network over the whole channel vector.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub structure: PolicyStructure,
    pub hidden: Vec<usize>,
    /// Output scale of the sigmoid layer; defaults to `p_max`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    pub theta: InitScheme,
    pub x: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub n_mc: usize,
    pub seed: u64,
    /// Relative budget tolerance for waterfilling.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub wmmse: WmmseConfig,
}

fn default_smoothing() -> SmoothingParams {
    SmoothingParams { mu_s: 0.1, mu_r: 0.1 }
}

fn default_ma_window() -> usize {
    1000
}

fn default_log_every() -> u64 {
    100
}

fn default_true() -> bool {
    true
}

fn default_tol() -> f64 {
    1e-6
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be > 0, got {v}")))
    }
}

fn nonneg(field: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be >= 0, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::config("<json>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::config("name", "must be nonempty"));
        }
        let p = &self.problem;
        if p.n_users == 0 {
            return Err(Error::config("problem.n_users", "must be >= 1"));
        }
        positive("problem.p_max", p.p_max)?;
        positive("problem.noise", p.noise)?;
        positive("problem.channel_rate", p.channel_rate)?;
        if let WeightsSpec::Explicit { values } = &p.weights {
            if values.len() != p.n_users {
                return Err(Error::config(
                    "problem.weights.values",
                    format!("expected {} entries, got {}", p.n_users, values.len()),
                ));
            }
        }
        self.service_spec()
            .and_then(|s| s.validate())
            .map_err(|e| Error::config("problem", e.to_string()))?;

        positive("smoothing.mu_r", self.smoothing.mu_r)?;
        nonneg("smoothing.mu_s", self.smoothing.mu_s)?;
        if let Some(m) = self.mu_theta {
            positive("mu_theta", m)?;
        }
        self.slack
            .validate(p.n_users + 1)
            .map_err(|e| Error::config("slack", e.to_string()))?;
        if self.objective == ObjectiveMode::SmoothedZerothOrder {
            positive("smoothing.mu_s", self.smoothing.mu_s)?;
        }

        self.schedules
            .pdzdpg_plus
            .validate()
            .map_err(|e| Error::config("schedules.pdzdpg_plus", e.to_string()))?;
        if let Some(s) = &self.schedules.pdzdpg {
            s.validate()
                .map_err(|e| Error::config("schedules.pdzdpg", e.to_string()))?;
        }
        self.schedule()?;

        if self.policy.hidden.contains(&0) {
            return Err(Error::config("policy.hidden", "layer widths must be >= 1"));
        }
        if let Some(s) = self.policy.output_scale {
            positive("policy.output_scale", s)?;
        }
        match self.init.theta {
            InitScheme::Constant { value } if !value.is_finite() => {
                return Err(Error::config("init.theta.value", "must be finite"));
            }
            InitScheme::UniformFanIn { gain } => nonneg("init.theta.gain", gain)?,
            _ => {}
        }
        nonneg("init.x", self.init.x)?;
        nonneg("init.lambda", self.init.lambda)?;

        if self.n_iters == 0 {
            return Err(Error::config("n_iters", "must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::config("seeds", "seeds must be distinct"));
        }
        if self.ma_window == 0 {
            return Err(Error::config("ma_window", "must be >= 1"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be >= 1"));
        }
        if self.benchmark.n_mc == 0 {
            return Err(Error::config("benchmark.n_mc", "must be >= 1"));
        }
        positive("benchmark.tol", self.benchmark.tol)?;
        if self.benchmark.wmmse.max_iters == 0 {
            return Err(Error::config("benchmark.wmmse.max_iters", "must be >= 1"));
        }
        positive("benchmark.wmmse.tol", self.benchmark.wmmse.tol)?;
        Ok(())
    }

    /// Step sizes for the configured algorithm.
    pub fn schedule(&self) -> Result<StepSchedule> {
        match self.algo {
            Algorithm::PdZdpgPlus => Ok(self.schedules.pdzdpg_plus),
            Algorithm::PdZdpg => self
                .schedules
                .pdzdpg
                .ok_or_else(|| Error::config("schedules.pdzdpg", "missing for algo pdzdpg")),
        }
    }

    pub fn mu_theta(&self) -> f64 {
        self.mu_theta.unwrap_or(self.smoothing.mu_r)
    }

    pub fn output_scale(&self) -> f64 {
        self.policy.output_scale.unwrap_or(self.problem.p_max)
    }

    pub fn weights(&self) -> Vec<f64> {
        let n = self.problem.n_users;
        match &self.problem.weights {
            WeightsSpec::Uniform => vec![1.0 / n as f64; n],
            WeightsSpec::Random { seed } => random_weights(n, &mut stream(*seed, Stream::Weights)),
            WeightsSpec::Explicit { values } => values.clone(),
        }
    }

    pub fn service_spec(&self) -> Result<ServiceSpec> {
        let p = &self.problem;
        Ok(ServiceSpec {
            kind: p.service,
            weights: self.weights(),
            noise: vec![p.noise; p.n_users],
            p_max: p.p_max,
            n_users: p.n_users,
        })
    }

    pub fn channel_dist(&self) -> Result<ChannelDist> {
        ChannelDist::exponential(self.problem.channel_rate, self.problem.n_users)
    }

    /// Short SHA-256 digest of the canonical JSON form (defaults applied).
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        hex::encode(&digest[..8])
    }

    pub fn with_algo(&self, algo: Algorithm) -> Result<Self> {
        let mut c = self.clone();
        c.algo = algo;
        c.validate()?;
        Ok(c)
    }

    pub fn with_seeds(&self, seeds: Vec<u64>) -> Result<Self> {
        let mut c = self.clone();
        c.seeds = seeds;
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"{
        "name": "tiny",
        "problem": {"service": "awgn", "n_users": 2, "p_max": 20.0, "noise": 1.0,
                    "channel_rate": 0.5, "weights": {"kind": "random", "seed": 3}},
        "algo": "pdzdpg_plus",
        "schedules": {"pdzdpg_plus": {"alpha_x": 0.001, "alpha_theta": 0.02,
                      "alpha_lambda_rate": 0.008, "alpha_lambda_power": 0.0001}},
        "policy": {"structure": "per_user", "hidden": [8, 4]},
        "init": {"theta": {"scheme": "zeros"}, "x": 1.0, "lambda": 1.0},
        "n_iters": 100,
        "seeds": [0, 1],
        "benchmark": {"n_mc": 1000, "seed": 11}
    }"#;

    #[test]
    fn defaults_applied() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.ma_window, 1000);
        assert_eq!(c.log_every, 100);
        assert_eq!(c.smoothing.mu_r, 0.1);
        assert_eq!(c.mu_theta(), 0.1);
        assert_eq!(c.output_scale(), 20.0);
        assert!(c.x_rail);
        assert!(!c.record_timing);
        let w = c.weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(w, c.weights());
    }

    #[test]
    fn unknown_key_rejected() {
        let text = MINIMAL.replace("\"n_iters\"", "\"bogus\": 1, \"n_iters\"");
        let err = ExperimentConfig::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn negative_step_rejected() {
        let text = MINIMAL.replace("\"alpha_x\": 0.001", "\"alpha_x\": -0.001");
        let err = ExperimentConfig::from_json(&text).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        assert!(err.to_string().contains("alpha_x"), "{err}");
    }

    #[test]
    fn pdzdpg_needs_its_schedule() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert!(c.with_algo(Algorithm::PdZdpg).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        let d = c.with_seeds(vec![5]).unwrap();
        assert_eq!(c.hash(), ExperimentConfig::from_json(MINIMAL).unwrap().hash());
        assert_ne!(c.hash(), d.hash());
        assert_eq!(c.hash().len(), 16);
    }

    #[test]
    fn round_trips_through_json() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        let d = ExperimentConfig::from_json(&c.to_json_pretty()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn duplicate_seeds_rejected() {
        let text = MINIMAL.replace("[0, 1]", "[2, 2]");
        assert!(ExperimentConfig::from_json(&text).is_err());
    }
}
