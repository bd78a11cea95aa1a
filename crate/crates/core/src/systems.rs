//! Resource-allocation instances: fading channels and service functions.
//!
//! The service vector of both problems is `[rate_1, ..., rate_N, p_max - sum(p)]`:
//! one ergodic rate constraint per user, coupled to the ergodic iterate `x`,
//! plus a total-power budget that is not coupled to `x`.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::smoothing::BoxSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    ExponentialIid,
}

/// I.i.d. fading gains, `H_i ~ Exp(rate)` (mean `1 / rate`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelDist {
    pub kind: ChannelKind,
    pub rate: f64,
    pub dim: usize,
}

impl ChannelDist {
    pub fn exponential(rate: f64, dim: usize) -> Result<Self> {
        let d = ChannelDist {
            kind: ChannelKind::ExponentialIid,
            rate,
            dim,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(Error::invalid("rate", format!("must be > 0, got {}", self.rate)));
        }
        if self.dim == 0 {
            return Err(Error::invalid("dim", "must be >= 1"));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        1.0 / self.rate
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut h = vec![0.0; self.dim];
        self.sample_into(&mut h, rng);
        h
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, out: &mut [f64], rng: &mut R) {
        let exp = Exp::new(self.rate).expect("validated rate");
        for h in out.iter_mut() {
            // Exp can return exactly 0 with negligible probability; gains stay positive.
            *h = exp.sample(rng).max(f64::MIN_POSITIVE);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceKind {
    /// Dedicated interference-free channels.
    Awgn,
    /// Multiple access with interference from every other user.
    Mai,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub kind: ServiceKind,
    pub weights: Vec<f64>,
    pub noise: Vec<f64>,
    pub p_max: f64,
    pub n_users: usize,
}

impl ServiceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 {
            return Err(Error::invalid("n_users", "must be >= 1"));
        }
        check_len("user weights", self.n_users, self.weights.len())?;
        check_len("noise powers", self.n_users, self.noise.len())?;
        if self.weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::invalid("weights", "must be positive"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("weights", format!("must sum to 1, sum is {total}")));
        }
        if self.noise.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("noise", "must be positive"));
        }
        if !(self.p_max > 0.0 && self.p_max.is_finite()) {
            return Err(Error::invalid("p_max", "must be positive"));
        }
        Ok(())
    }

    pub fn rates(&self, h: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        match self.kind {
            ServiceKind::Awgn => awgn_rates(h, p, &self.noise),
            ServiceKind::Mai => mai_rates(h, p, &self.noise),
        }
    }

    pub fn weighted_sumrate(&self, rates: &[f64]) -> f64 {
        self.weights.iter().zip(rates).map(|(w, r)| w * r).sum()
    }

    /// `[rates; p_max - sum(p)]`
    pub fn service_vector(&self, h: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        let mut f = self.rates(h, p)?;
        f.push(self.p_max - p.iter().sum::<f64>());
        Ok(f)
    }
}

/// Uniform draws normalized to sum to one.
pub fn random_weights<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    // 1 - U lies in (0, 1], so every weight is strictly positive.
    let raw: Vec<f64> = (0..n).map(|_| 1.0 - rng.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|r| r / total).collect();
    // Absorb rounding so the sum is 1 to the last bit or two.
    let err: f64 = 1.0 - w.iter().sum::<f64>();
    w[0] += err;
    w
}

fn check_rate_args(h: &[f64], p: &[f64], v: &[f64]) -> Result<()> {
    check_len("channel/action", h.len(), p.len())?;
    check_len("channel/noise", h.len(), v.len())?;
    if let Some(bad) = v.iter().find(|&&x| !(x > 0.0)) {
        return Err(Error::invalid("noise", format!("must be positive, got {bad}")));
    }
    Ok(())
}

/// `log(1 + h_i p_i / v_i)` in nats.
pub fn awgn_rates(h: &[f64], p: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_rate_args(h, p, v)?;
    Ok(h.iter()
        .zip(p)
        .zip(v)
        .map(|((h, p), v)| (h * p / v).ln_1p())
        .collect())
}

/// `log(1 + h_i p_i / (v_i + sum_{j != i} h_j p_j))` in nats.
pub fn mai_rates(h: &[f64], p: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_rate_args(h, p, v)?;
    let received: Vec<f64> = h.iter().zip(p).map(|(h, p)| h * p).collect();
    let total: f64 = received.iter().sum();
    Ok(received
        .iter()
        .zip(v)
        .map(|(&own, v)| {
            let interference = (total - own).max(0.0);
            (own / (v + interference)).ln_1p()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintSign {
    /// `E f_i >= x_i`
    ServiceGeX,
    /// `budget - E usage >= 0`
    BudgetGeUsage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintDesc {
    pub couples_x: bool,
    pub sign: ConstraintSign,
}

/// Which entries of the service vector are coupled to `x`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintLayout {
    pub constraints: Vec<ConstraintDesc>,
}

impl ConstraintLayout {
    /// `n_users` rate constraints followed by one power budget.
    pub fn rates_and_power(n_users: usize) -> Self {
        let mut constraints = vec![
            ConstraintDesc {
                couples_x: true,
                sign: ConstraintSign::ServiceGeX,
            };
            n_users
        ];
        constraints.push(ConstraintDesc {
            couples_x: false,
            sign: ConstraintSign::BudgetGeUsage,
        });
        ConstraintLayout { constraints }
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    /// For every constraint, the index of the `x` coordinate it couples to.
    pub fn x_coupling(&self) -> Vec<Option<usize>> {
        let mut next = 0;
        self.constraints
            .iter()
            .map(|c| {
                c.couples_x.then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    }

    pub fn n_coupled(&self) -> usize {
        self.constraints.iter().filter(|c| c.couples_x).count()
    }
}

/// `f = [rates; p_max - sum(p)]` and residuals `f_i - x_i - slack_i`
/// (coupled) or `f_i - slack_i` (uncoupled).
pub fn service_and_constraints(
    spec: &ServiceSpec,
    layout: &ConstraintLayout,
    h: &[f64],
    p: &[f64],
    x: &[f64],
    slack: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let f = spec.service_vector(h, p)?;
    let residuals = constraint_residuals(layout, &f, x, slack)?;
    Ok((f, residuals))
}

pub fn constraint_residuals(
    layout: &ConstraintLayout,
    f: &[f64],
    x: &[f64],
    slack: &[f64],
) -> Result<Vec<f64>> {
    check_len("service vector", layout.len(), f.len())?;
    check_len("slack", layout.len(), slack.len())?;
    check_len("ergodic iterate", layout.n_coupled(), x.len())?;
    Ok(layout
        .x_coupling()
        .iter()
        .zip(f.iter().zip(slack))
        .map(|(c, (fi, si))| match c {
            Some(i) => fi - x[*i] - si,
            None => fi - si,
        })
        .collect())
}

/// A black-box system the learner can sample and probe.
pub trait System {
    fn n_users(&self) -> usize;
    fn action_set(&self) -> &BoxSet;
    fn layout(&self) -> &ConstraintLayout;
    fn weights(&self) -> &[f64];
    fn sample_channel(&self, rng: &mut crate::SimRng) -> Vec<f64>;
    /// One measurement of the service vector at `action` under channel `h`.
    fn probe(&self, action: &[f64], h: &[f64]) -> Result<Vec<f64>>;
    /// Total power drawn by an action.
    fn power(&self, action: &[f64]) -> f64 {
        action.iter().sum()
    }
    fn p_max(&self) -> f64;
}

/// An AWGN or MAI problem instance.
#[derive(Debug, Clone)]
pub struct Problem {
    pub spec: ServiceSpec,
    pub dist: ChannelDist,
    layout: ConstraintLayout,
    action_set: BoxSet,
}

impl Problem {
    pub fn new(spec: ServiceSpec, dist: ChannelDist) -> Result<Self> {
        spec.validate()?;
        dist.validate()?;
        check_len("channel dimension", spec.n_users, dist.dim)?;
        let layout = ConstraintLayout::rates_and_power(spec.n_users);
        let action_set = BoxSet::uniform(spec.n_users, 0.0, spec.p_max)?;
        Ok(Problem {
            spec,
            dist,
            layout,
            action_set,
        })
    }

    /// Per-user upper rail for `x`: ten times the rate of one user running at
    /// full power under the mean channel gain.
    pub fn x_rail(&self) -> Vec<f64> {
        self.spec
            .noise
            .iter()
            .map(|v| 10.0 * (self.spec.p_max * self.dist.mean() / v).ln_1p())
            .collect()
    }
}

impl System for Problem {
    fn n_users(&self) -> usize {
        self.spec.n_users
    }

    fn action_set(&self) -> &BoxSet {
        &self.action_set
    }

    fn layout(&self) -> &ConstraintLayout {
        &self.layout
    }

    fn weights(&self) -> &[f64] {
        &self.spec.weights
    }

    fn sample_channel(&self, rng: &mut crate::SimRng) -> Vec<f64> {
        self.dist.sample(rng)
    }

    fn probe(&self, action: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        self.spec.service_vector(h, action)
    }

    fn p_max(&self) -> f64 {
        self.spec.p_max
    }
}
