//! Primal-dual stochastic approximation with zeroth-order policy gradients.
//!
//! One iteration of [`Learner::step`] (action-space exploration):
//!
//! 1. draw `U_S` (only when the utilities are smoothed), `U_R` and a channel `H`;
//! 2. probe the system at `phi(H, theta)` and at `Π_A{phi(H, theta) + mu_R U_R}`;
//! 3. ascend `x` and `theta` (one VJP through the policy);
//! 4. re-probe at `Π_A{phi(H, theta_next) + mu_R U_R}` with the *updated* policy
//!    and the same `H`, `U_R`;
//! 5. descend the multipliers with positive-part projection.
//!
//! [`Algorithm::PdZdpg`] keeps the same skeleton but perturbs the policy
//! parameters instead of the action, so its exploration dimension is the
//! number of parameters rather than the number of users.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::harness::record::{MetricsTracker, RunRecord};
use crate::policy::{axpy, PolicyParams, SweepStats};
use crate::smoothing::{fill_gaussian, finite_diff, BoxSet, FiniteDiffVec, SmoothingParams};
use crate::systems::{constraint_residuals, ConstraintLayout, ConstraintSign, System};
use crate::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Action-space perturbations plus one policy VJP per iteration.
    #[serde(rename = "pdzdpg_plus", alias = "pdzdpg+")]
    PdZdpgPlus,
    /// Parameter-space perturbations, no VJP.
    #[serde(rename = "pdzdpg")]
    PdZdpg,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::PdZdpgPlus => "pdzdpg_plus",
            Algorithm::PdZdpg => "pdzdpg",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pdzdpg+" | "pdzdpg_plus" | "pdzdpg-plus" => Ok(Algorithm::PdZdpgPlus),
            "pdzdpg" => Ok(Algorithm::PdZdpg),
            other => Err(Error::invalid("algo", format!("unknown algorithm `{other}`"))),
        }
    }
}

/// Constant per-block step sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSchedule {
    pub alpha_x: f64,
    pub alpha_theta: f64,
    pub alpha_lambda_rate: f64,
    pub alpha_lambda_power: f64,
    /// Step for explicit utility-constraint multipliers; defaults to
    /// `alpha_lambda_rate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_lambda_s: Option<f64>,
}

impl StepSchedule {
    pub fn alpha_lambda_s(&self) -> f64 {
        self.alpha_lambda_s.unwrap_or(self.alpha_lambda_rate)
    }

    fn entries(&self) -> [(&'static str, f64); 5] {
        [
            ("alpha_x", self.alpha_x),
            ("alpha_theta", self.alpha_theta),
            ("alpha_lambda_rate", self.alpha_lambda_rate),
            ("alpha_lambda_power", self.alpha_lambda_power),
            ("alpha_lambda_s", self.alpha_lambda_s()),
        ]
    }

    /// Step sizes a run may be configured with: finite and strictly positive.
    pub fn validate(&self) -> Result<()> {
        for (name, a) in self.entries() {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::invalid(name, format!("must be > 0, got {a}")));
            }
        }
        Ok(())
    }

    fn validate_nonneg(&self) -> Result<()> {
        for (name, a) in self.entries() {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::invalid(name, format!("must be >= 0, got {a}")));
            }
        }
        Ok(())
    }

    /// Dual step for each constraint of `layout`.
    pub fn dual_steps(&self, layout: &ConstraintLayout) -> Vec<f64> {
        layout
            .constraints
            .iter()
            .map(|c| match c.sign {
                ConstraintSign::ServiceGeX => self.alpha_lambda_rate,
                ConstraintSign::BudgetGeUsage => self.alpha_lambda_power,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SlackMode {
    #[default]
    Zero,
    /// `S(mu_R) = mu_R * c_R * sqrt(N_R)`
    Linear,
}

/// Feasibility slack subtracted from every service constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SlackSpec {
    pub mode: SlackMode,
    /// Per-constraint Lipschitz estimates; required in linear mode,
    /// optional otherwise (then used only for the violation diagnostic).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_r: Option<Vec<f64>>,
}

impl SlackSpec {
    pub fn validate(&self, n_constraints: usize) -> Result<()> {
        if let Some(c) = &self.c_r {
            check_len("slack c_r", n_constraints, c.len())?;
            if c.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::invalid("c_r", "entries must be finite and >= 0"));
            }
        } else if self.mode == SlackMode::Linear {
            return Err(Error::invalid("c_r", "linear slack needs Lipschitz estimates"));
        }
        Ok(())
    }

    pub fn values(&self, mu_r: f64, action_dim: usize, n_constraints: usize) -> Vec<f64> {
        match (self.mode, &self.c_r) {
            (SlackMode::Linear, Some(c)) => {
                let scale = mu_r * (action_dim as f64).sqrt();
                c.iter().map(|ci| scale * ci).collect()
            }
            _ => vec![0.0; n_constraints],
        }
    }

    /// Worst-case violation of the original constraints implied by the
    /// smoothing radius: `max(0, mu_R c_R sqrt(N_R) - S(mu_R))`. `None`
    /// when no Lipschitz estimates are configured.
    pub fn violation_bound(&self, mu_r: f64, action_dim: usize) -> Option<Vec<f64>> {
        let c = self.c_r.as_ref()?;
        let s = self.values(mu_r, action_dim, c.len());
        let scale = mu_r * (action_dim as f64).sqrt();
        Some(
            c.iter()
                .zip(s)
                .map(|(ci, si)| (scale * ci - si).max(0.0))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    /// The objective `w'x` is known, its gradient `w` is used directly.
    #[default]
    ExactLinear,
    /// The objective is probed and smoothed like any other utility.
    SmoothedZerothOrder,
}

pub type UtilityFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Designer-side utilities: objective `w'x` and explicit concave
/// constraints `g(x) >= 0`.
#[derive(Clone)]
pub struct Utility {
    pub weights: Vec<f64>,
    pub mode: ObjectiveMode,
    pub constraints: Vec<UtilityFn>,
}

impl std::fmt::Debug for Utility {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Utility")
            .field("weights", &self.weights)
            .field("mode", &self.mode)
            .field("n_constraints", &self.constraints.len())
            .finish()
    }
}

impl Utility {
    pub fn linear(weights: Vec<f64>) -> Self {
        Utility {
            weights,
            mode: ObjectiveMode::ExactLinear,
            constraints: Vec::new(),
        }
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, x)| w * x).sum()
    }

    pub fn n_g(&self) -> usize {
        self.constraints.len()
    }

    pub fn eval_constraints(&self, x: &[f64]) -> Vec<f64> {
        self.constraints.iter().map(|g| g(x)).collect()
    }

    fn needs_state_perturbation(&self) -> bool {
        self.n_g() > 0 || self.mode == ObjectiveMode::SmoothedZerothOrder
    }
}

/// Primal and dual iterates.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerState {
    pub x: Vec<f64>,
    pub params: PolicyParams,
    pub lambda_s: Vec<f64>,
    pub lambda_r: Vec<f64>,
    pub iter: u64,
}

impl LearnerState {
    fn check_finite(&self, iter: u64) -> Result<()> {
        let fields: [(&'static str, &[f64]); 4] = [
            ("x", &self.x),
            ("theta", self.params.theta()),
            ("lambda_s", &self.lambda_s),
            ("lambda_r", &self.lambda_r),
        ];
        for (field, v) in fields {
            if v.iter().any(|t| !t.is_finite()) {
                return Err(Error::NonFinite { iter, field });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LearnerConfig {
    pub algo: Algorithm,
    pub smoothing: SmoothingParams,
    /// Radius of the parameter-space perturbation used by
    /// [`Algorithm::PdZdpg`].
    pub mu_theta: f64,
    pub slack: SlackSpec,
    pub schedule: StepSchedule,
    /// Feasible set for `x`; the nonnegative orthant, optionally capped.
    pub x_set: BoxSet,
}

/// Per-iteration instantaneous measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    /// Rates at the unperturbed action `phi(H, theta_k)`.
    pub rates: Vec<f64>,
    pub weighted_sumrate: f64,
    pub power_used: f64,
    /// Residuals that drove the multiplier update.
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub metrics: StepMetrics,
    pub probes: u32,
    pub vjps: u32,
    pub perturbation_dim: usize,
    /// Coordinates of `x` clipped at the upper rail this iteration.
    pub rail_hits: usize,
}

/// `x <- Π_X{ x + alpha_x (G + U_S (Δ_g' λ_S) - λ_R^coupled) }`
///
/// `grad_obj` is `w` in exact mode or `Δ_g^o U_S` in smoothed mode. Returns
/// the new iterate and the number of coordinates clipped at a finite upper
/// bound of `x_set`.
#[allow(clippy::too_many_arguments)]
pub fn primal_x_step(
    x: &[f64],
    grad_obj: &[f64],
    delta_g: Option<&FiniteDiffVec>,
    u_s: Option<&[f64]>,
    lambda_s: &[f64],
    lambda_r: &[f64],
    layout: &ConstraintLayout,
    alpha_x: f64,
    x_set: &BoxSet,
) -> Result<(Vec<f64>, usize)> {
    check_len("objective gradient", x.len(), grad_obj.len())?;
    check_len("lambda_r", layout.len(), lambda_r.len())?;
    check_len("ergodic iterate", layout.n_coupled(), x.len())?;
    let mut dir = grad_obj.to_vec();
    if let (Some(dg), Some(u)) = (delta_g, u_s) {
        check_len("U_S", x.len(), u.len())?;
        let s = dg.dot(lambda_s)?;
        axpy(s, u, &mut dir);
    }
    for (c, l) in layout.x_coupling().into_iter().zip(lambda_r) {
        if let Some(i) = c {
            dir[i] -= l;
        }
    }
    let mut next = x.to_vec();
    axpy(alpha_x, &dir, &mut next);
    let hits = x_set.project_in_place(&mut next)?;
    Ok((next, hits))
}

/// Cotangent `(Δ_f' λ_R) U_R` pushed through the policy.
pub fn theta_cotangent(delta_f: &FiniteDiffVec, lambda_r: &[f64], u_r: &[f64]) -> Result<Vec<f64>> {
    let s = delta_f.dot(lambda_r)?;
    Ok(u_r.iter().map(|u| s * u).collect())
}

/// `theta <- theta + alpha_theta * grad_theta phi(H, theta)' (Δ_f' λ_R) U_R`
pub fn primal_theta_step(
    params: &PolicyParams,
    h: &[f64],
    u_r: &[f64],
    delta_f: &FiniteDiffVec,
    lambda_r: &[f64],
    alpha_theta: f64,
) -> Result<PolicyParams> {
    check_len("U_R", params.arch().action_dim(), u_r.len())?;
    let cot = theta_cotangent(delta_f, lambda_r, u_r)?;
    let g = params.vjp(h, &cot)?;
    let mut next = params.clone();
    axpy(alpha_theta, &g, next.theta_mut());
    Ok(next)
}

/// `λ_S <- [λ_S - alpha g(Π_X{x_next + mu_S U_S})]_+`
pub fn dual_lambda_s_step(lambda_s: &[f64], g_values: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_len("utility constraints", lambda_s.len(), g_values.len())?;
    Ok(lambda_s
        .iter()
        .zip(g_values)
        .map(|(l, g)| (l - alpha * g).max(0.0))
        .collect())
}

/// `λ_R <- [λ_R - alpha ∘ residuals]_+`, power multiplier with its own step.
pub fn dual_lambda_r_step(
    lambda_r: &[f64],
    residuals: &[f64],
    layout: &ConstraintLayout,
    schedule: &StepSchedule,
) -> Result<Vec<f64>> {
    check_len("lambda_r", layout.len(), lambda_r.len())?;
    check_len("residuals", layout.len(), residuals.len())?;
    Ok(lambda_r
        .iter()
        .zip(residuals)
        .zip(schedule.dual_steps(layout))
        .map(|((l, r), a)| (l - a * r).max(0.0))
        .collect())
}

/// One sample of the action-space policy-gradient direction
/// `grad_theta phi(H, theta)' U_R Δ_f' λ_R` (two probes, one VJP).
pub fn action_space_direction<S: System + ?Sized>(
    params: &PolicyParams,
    system: &S,
    h: &[f64],
    u_r: &[f64],
    mu_r: f64,
    lambda_r: &[f64],
) -> Result<Vec<f64>> {
    let a = params.forward(h)?;
    let mut a_pert = a.clone();
    axpy(mu_r, u_r, &mut a_pert);
    system.action_set().project_in_place(&mut a_pert)?;
    let f0 = system.probe(&a, h)?;
    let f1 = system.probe(&a_pert, h)?;
    let df = finite_diff(&f0, &f1, mu_r)?;
    let cot = theta_cotangent(&df, lambda_r, u_r)?;
    params.vjp(h, &cot)
}

/// One sample of the parameter-space direction `(Δ_f' λ_R) U_θ`, where the
/// finite difference compares `Π_A{policy(theta + mu U_θ)}` against
/// `policy(theta)`.
pub fn parameter_space_direction<P, F>(
    mut policy: P,
    mut probe: F,
    theta: &[f64],
    u_theta: &[f64],
    mu: f64,
    lambda_r: &[f64],
    action_set: &BoxSet,
) -> Result<Vec<f64>>
where
    P: FnMut(&[f64]) -> Result<Vec<f64>>,
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    check_len("U_theta", theta.len(), u_theta.len())?;
    let a = policy(theta)?;
    let mut theta_pert = theta.to_vec();
    axpy(mu, u_theta, &mut theta_pert);
    let mut a_pert = policy(&theta_pert)?;
    action_set.project_in_place(&mut a_pert)?;
    let df = finite_diff(&probe(&a)?, &probe(&a_pert)?, mu)?;
    let s = df.dot(lambda_r)?;
    Ok(u_theta.iter().map(|u| s * u).collect())
}

/// A single learning run over one system.
pub struct Learner<S: System> {
    system: S,
    utility: Utility,
    config: LearnerConfig,
    state: LearnerState,
    rng: SimRng,
    slack: Vec<f64>,
    rail_hits: u64,
}

impl<S: System> Learner<S> {
    pub fn new(
        system: S,
        utility: Utility,
        config: LearnerConfig,
        state: LearnerState,
        rng: SimRng,
    ) -> Result<Self> {
        let n_s = system.n_users();
        let layout = system.layout();
        let arch = state.params.arch();
        check_len("policy action", system.action_set().dim(), arch.action_dim())?;
        check_len("ergodic iterate", n_s, state.x.len())?;
        check_len("x set", n_s, config.x_set.dim())?;
        check_len("objective weights", n_s, utility.weights.len())?;
        check_len("lambda_r", layout.len(), state.lambda_r.len())?;
        check_len("lambda_s", utility.n_g(), state.lambda_s.len())?;
        check_len("rate constraints", n_s, layout.n_coupled())?;
        config.smoothing.validate()?;
        config.schedule.validate_nonneg()?;
        config.slack.validate(layout.len())?;
        if !(config.smoothing.mu_r > 0.0) {
            return Err(Error::invalid("mu_r", "action smoothing radius must be > 0"));
        }
        if utility.needs_state_perturbation() && !(config.smoothing.mu_s > 0.0) {
            return Err(Error::invalid("mu_s", "smoothed utilities need mu_s > 0"));
        }
        if config.algo == Algorithm::PdZdpg && !(config.mu_theta > 0.0) {
            return Err(Error::invalid("mu_theta", "parameter smoothing radius must be > 0"));
        }
        let slack = config
            .slack
            .values(config.smoothing.mu_r, arch.action_dim(), layout.len());
        Ok(Learner {
            system,
            utility,
            config,
            state,
            rng,
            slack,
            rail_hits: 0,
        })
    }

    pub fn state(&self) -> &LearnerState {
        &self.state
    }

    pub fn into_state(self) -> LearnerState {
        self.state
    }

    pub fn system(&self) -> &S {
        &self.system
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn rail_hits(&self) -> u64 {
        self.rail_hits
    }

    pub fn step(&mut self) -> Result<StepOutcome> {
        let outcome = match self.config.algo {
            Algorithm::PdZdpgPlus => self.step_action_space(),
            Algorithm::PdZdpg => self.step_parameter_space(),
        }?;
        self.state.iter += 1;
        self.rail_hits += outcome.rail_hits as u64;
        Ok(outcome)
    }

    /// Utility-side quantities at `x_k`: the objective ascent direction
    /// and `Δ_g` (when explicit constraints exist).
    fn utility_gradients(
        &self,
        u_s: Option<&[f64]>,
    ) -> Result<(Vec<f64>, Option<FiniteDiffVec>)> {
        let x = &self.state.x;
        let Some(u) = u_s else {
            return Ok((self.utility.weights.clone(), None));
        };
        let mu_s = self.config.smoothing.mu_s;
        let x_pert = self.perturbed_x(x, u)?;
        let grad = match self.utility.mode {
            ObjectiveMode::ExactLinear => self.utility.weights.clone(),
            ObjectiveMode::SmoothedZerothOrder => {
                let d = (self.utility.objective(&x_pert) - self.utility.objective(x)) / mu_s;
                u.iter().map(|ui| d * ui).collect()
            }
        };
        let delta_g = if self.utility.n_g() > 0 {
            Some(finite_diff(
                &self.utility.eval_constraints(x),
                &self.utility.eval_constraints(&x_pert),
                mu_s,
            )?)
        } else {
            None
        };
        Ok((grad, delta_g))
    }

    fn perturbed_x(&self, x: &[f64], u_s: &[f64]) -> Result<Vec<f64>> {
        let mut p = x.to_vec();
        axpy(self.config.smoothing.mu_s, u_s, &mut p);
        self.config.x_set.project_in_place(&mut p)?;
        Ok(p)
    }

    fn draw_state_perturbation(&mut self) -> Option<Vec<f64>> {
        self.utility.needs_state_perturbation().then(|| {
            let mut u = vec![0.0; self.state.x.len()];
            fill_gaussian(&mut u, &mut self.rng);
            u
        })
    }

    fn probe_checked(&self, action: &[f64], h: &[f64], field: &'static str) -> Result<Vec<f64>> {
        let f = self.system.probe(action, h)?;
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                iter: self.state.iter,
                field,
            });
        }
        Ok(f)
    }

    /// Shared tail of both variants: x update already done; finish with the
    /// multipliers given the dual re-probe `f_dual`.
    #[allow(clippy::too_many_arguments)]
    fn finish(
        &mut self,
        x_next: Vec<f64>,
        params_next: PolicyParams,
        u_s: Option<&[f64]>,
        f_dual: &[f64],
        f_base: &[f64],
        base_action: &[f64],
        probes: u32,
        vjps: u32,
        perturbation_dim: usize,
        rail_hits: usize,
    ) -> Result<StepOutcome> {
        let schedule = self.config.schedule;
        let lambda_s = match u_s {
            Some(u) if self.utility.n_g() > 0 => {
                let g = self.utility.eval_constraints(&self.perturbed_x(&x_next, u)?);
                dual_lambda_s_step(&self.state.lambda_s, &g, schedule.alpha_lambda_s())?
            }
            _ => self.state.lambda_s.clone(),
        };
        let layout = self.system.layout();
        let residuals = constraint_residuals(layout, f_dual, &x_next, &self.slack)?;
        let lambda_r = dual_lambda_r_step(&self.state.lambda_r, &residuals, layout, &schedule)?;

        let next = LearnerState {
            x: x_next,
            params: params_next,
            lambda_s,
            lambda_r,
            iter: self.state.iter,
        };
        next.check_finite(self.state.iter)?;
        self.state = next;

        let rates = f_base[..self.system.n_users()].to_vec();
        let weighted_sumrate = self.utility.weights.iter().zip(&rates).map(|(w, r)| w * r).sum();
        Ok(StepOutcome {
            metrics: StepMetrics {
                rates,
                weighted_sumrate,
                power_used: self.system.power(base_action),
                residuals,
            },
            probes,
            vjps,
            perturbation_dim,
            rail_hits,
        })
    }

    fn step_action_space(&mut self) -> Result<StepOutcome> {
        let mu_r = self.config.smoothing.mu_r;
        let u_s = self.draw_state_perturbation();
        let arch = self.state.params.arch().clone();
        let mut u_r = vec![0.0; arch.action_dim()];
        fill_gaussian(&mut u_r, &mut self.rng);
        let h = self.system.sample_channel(&mut self.rng);

        let (grad_obj, delta_g) = self.utility_gradients(u_s.as_deref())?;

        let theta = self.state.params.theta();
        let tape = arch.forward_with_tape(theta, &h)?;
        let action = tape.output.clone();
        let mut action_pert = action.clone();
        axpy(mu_r, &u_r, &mut action_pert);
        self.system.action_set().project_in_place(&mut action_pert)?;
        let f_base = self.probe_checked(&action, &h, "service probe")?;
        let f_pert = self.probe_checked(&action_pert, &h, "service probe")?;
        let delta_f = finite_diff(&f_base, &f_pert, mu_r)?;

        let (x_next, rail_hits) = primal_x_step(
            &self.state.x,
            &grad_obj,
            delta_g.as_ref(),
            u_s.as_deref(),
            &self.state.lambda_s,
            &self.state.lambda_r,
            self.system.layout(),
            self.config.schedule.alpha_x,
            &self.config.x_set,
        )?;

        let cot = theta_cotangent(&delta_f, &self.state.lambda_r, &u_r)?;
        let mut stats = SweepStats::default();
        let grad = arch.backward(theta, &tape, &cot, &mut stats)?;
        let mut params_next = self.state.params.clone();
        axpy(self.config.schedule.alpha_theta, &grad, params_next.theta_mut());

        let mut action_dual = params_next.forward(&h)?;
        axpy(mu_r, &u_r, &mut action_dual);
        self.system.action_set().project_in_place(&mut action_dual)?;
        let f_dual = self.probe_checked(&action_dual, &h, "service re-probe")?;

        self.finish(
            x_next,
            params_next,
            u_s.as_deref(),
            &f_dual,
            &f_base,
            &action,
            3,
            stats.backward_sweeps,
            u_r.len(),
            rail_hits,
        )
    }

    fn step_parameter_space(&mut self) -> Result<StepOutcome> {
        let mu = self.config.mu_theta;
        let u_s = self.draw_state_perturbation();
        let arch = self.state.params.arch().clone();
        let mut u_theta = vec![0.0; arch.n_params()];
        fill_gaussian(&mut u_theta, &mut self.rng);
        let h = self.system.sample_channel(&mut self.rng);

        let (grad_obj, delta_g) = self.utility_gradients(u_s.as_deref())?;

        let theta = self.state.params.theta();
        let action = arch.forward(theta, &h)?;
        let mut theta_pert = theta.to_vec();
        axpy(mu, &u_theta, &mut theta_pert);
        let mut action_pert = arch.forward(&theta_pert, &h)?;
        self.system.action_set().project_in_place(&mut action_pert)?;
        let f_base = self.probe_checked(&action, &h, "service probe")?;
        let f_pert = self.probe_checked(&action_pert, &h, "service probe")?;
        let delta_f = finite_diff(&f_base, &f_pert, mu)?;

        let (x_next, rail_hits) = primal_x_step(
            &self.state.x,
            &grad_obj,
            delta_g.as_ref(),
            u_s.as_deref(),
            &self.state.lambda_s,
            &self.state.lambda_r,
            self.system.layout(),
            self.config.schedule.alpha_x,
            &self.config.x_set,
        )?;

        let s = delta_f.dot(&self.state.lambda_r)?;
        let mut params_next = self.state.params.clone();
        axpy(self.config.schedule.alpha_theta * s, &u_theta, params_next.theta_mut());

        // Re-probe at the perturbed *updated* parameters.
        theta_pert.copy_from_slice(params_next.theta());
        axpy(mu, &u_theta, &mut theta_pert);
        let mut action_dual = arch.forward(&theta_pert, &h)?;
        self.system.action_set().project_in_place(&mut action_dual)?;
        let f_dual = self.probe_checked(&action_dual, &h, "service re-probe")?;

        self.finish(
            x_next,
            params_next,
            u_s.as_deref(),
            &f_dual,
            &f_base,
            &action,
            3,
            0,
            u_theta.len(),
            rail_hits,
        )
    }

    /// Run `n_iters` steps, feeding one [`RunRecord`] per iteration to
    /// `sink`. With `timing` off the `wall_ns` field is zero so that the
    /// records are reproducible bit for bit.
    pub fn run<F>(
        &mut self,
        n_iters: u64,
        seed: u64,
        ma_window: usize,
        timing: bool,
        mut sink: F,
    ) -> Result<()>
    where
        F: FnMut(&RunRecord) -> Result<()>,
    {
        let mut tracker =
            MetricsTracker::new(ma_window, self.system.n_users(), self.system.p_max())?;
        for _ in 0..n_iters {
            let start = timing.then(Instant::now);
            let outcome = self.step()?;
            let wall_ns = start.map_or(0, |t| t.elapsed().as_nanos() as u64);
            let record = tracker.record(seed, &self.state, &self.utility, &outcome, wall_ns);
            sink(&record)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{CompositePolicy, InitScheme, MlpSpec};
    use crate::rng::seeded;
    use crate::systems::{ChannelDist, Problem, ServiceKind, ServiceSpec};

    fn schedule(ax: f64) -> StepSchedule {
        StepSchedule {
            alpha_x: ax,
            alpha_theta: 0.02,
            alpha_lambda_rate: 0.008,
            alpha_lambda_power: 0.0001,
            alpha_lambda_s: None,
        }
    }

    #[test]
    fn x_step_examples() {
        let layout = ConstraintLayout::rates_and_power(2);
        let w = [0.6, 0.4];
        let set = BoxSet::nonneg(2);
        // λ_R^rates = w: stationary.
        let (x, _) =
            primal_x_step(&[1.0, 1.0], &w, None, None, &[], &[0.6, 0.4, 3.0], &layout, 0.001, &set)
                .unwrap();
        assert_eq!(x, vec![1.0, 1.0]);
        let (x, _) =
            primal_x_step(&[1.0, 1.0], &w, None, None, &[], &[0.0, 0.0, 3.0], &layout, 0.001, &set)
                .unwrap();
        assert!((x[0] - 1.0006).abs() < 1e-15 && (x[1] - 1.0004).abs() < 1e-15);
        let (x, _) =
            primal_x_step(&[0.0, 0.0], &w, None, None, &[], &[5.0, 5.0, 0.0], &layout, 0.1, &set)
                .unwrap();
        assert_eq!(x, vec![0.0, 0.0]);
    }

    #[test]
    fn x_step_counts_rail_hits() {
        let layout = ConstraintLayout::rates_and_power(2);
        let set = BoxSet::new(vec![0.0; 2], vec![1.0, 10.0]).unwrap();
        let (x, hits) =
            primal_x_step(&[1.0, 1.0], &[1.0, 1.0], None, None, &[], &[0.0; 3], &layout, 0.5, &set)
                .unwrap();
        assert_eq!(x, vec![1.0, 1.5]);
        assert_eq!(hits, 1);
    }

    #[test]
    fn x_step_with_utility_constraints() {
        let layout = ConstraintLayout::rates_and_power(1);
        let dg = FiniteDiffVec(vec![2.0]);
        let (x, _) = primal_x_step(
            &[1.0],
            &[0.5],
            Some(&dg),
            Some(&[0.5]),
            &[1.0],
            &[0.0, 0.0],
            &layout,
            0.1,
            &BoxSet::nonneg(1),
        )
        .unwrap();
        // 1 + 0.1 * (0.5 + 0.5 * 2 * 1)
        assert!((x[0] - 1.15).abs() < 1e-15);
    }

    #[test]
    fn lambda_s_examples() {
        assert_eq!(dual_lambda_s_step(&[1.0], &[0.0], 0.1).unwrap(), vec![1.0]);
        assert_eq!(dual_lambda_s_step(&[0.0], &[3.0], 0.1).unwrap(), vec![0.0]);
        assert!((dual_lambda_s_step(&[1.0], &[2.0], 0.1).unwrap()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn lambda_r_examples() {
        let layout = ConstraintLayout::rates_and_power(2);
        let s = schedule(0.001);
        assert_eq!(
            dual_lambda_r_step(&[1.0, 2.0, 3.0], &[0.0; 3], &layout, &s).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        let l = dual_lambda_r_step(&[1.0, 1.0, 1.0], &[-0.5, 0.0, -0.5], &layout, &s).unwrap();
        assert!((l[0] - 1.004).abs() < 1e-15);
        assert!((l[2] - 1.00005).abs() < 1e-15);
        assert_eq!(
            dual_lambda_r_step(&[0.0; 3], &[1.0, 2.0, 3.0], &layout, &s).unwrap(),
            vec![0.0; 3]
        );
    }

    #[test]
    fn cotangent_selects_direction() {
        let df = FiniteDiffVec(vec![1.0, 0.0, 0.0]);
        let u = [0.3, -1.2];
        assert_eq!(theta_cotangent(&df, &[1.0, 0.0, 0.0], &u).unwrap(), u.to_vec());
    }

    #[test]
    fn zero_multipliers_freeze_theta() {
        let arch = Arc::new(
            CompositePolicy::single(MlpSpec::new(vec![2, 3, 2], 20.0).unwrap()).unwrap(),
        );
        let p = PolicyParams::init(arch, InitScheme::UniformFanIn { gain: 1.0 }, &mut seeded(1));
        let df = FiniteDiffVec(vec![0.4, -2.0, 1.0]);
        let q = primal_theta_step(&p, &[1.0, 2.0], &[0.5, 0.5], &df, &[0.0; 3], 0.02).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn slack_modes() {
        let zero = SlackSpec::default();
        assert_eq!(zero.values(0.1, 4, 3), vec![0.0; 3]);
        assert_eq!(zero.violation_bound(0.1, 4), None);
        let lin = SlackSpec {
            mode: SlackMode::Linear,
            c_r: Some(vec![1.0, 2.0, 0.0]),
        };
        assert_eq!(lin.values(0.0, 4, 3), vec![0.0; 3]);
        let s = lin.values(0.1, 4, 3);
        assert!((s[1] - 0.4).abs() < 1e-15);
        // Monotone in mu_r.
        let s2 = lin.values(0.2, 4, 3);
        assert!(s.iter().zip(&s2).all(|(a, b)| a <= b));
        assert_eq!(lin.violation_bound(0.1, 4), Some(vec![0.0; 3]));
        let diag = SlackSpec {
            mode: SlackMode::Zero,
            c_r: Some(vec![1.0, 2.0, 0.0]),
        };
        let v = diag.violation_bound(0.1, 4).unwrap();
        assert!((v[1] - 0.4).abs() < 1e-15);
        assert!(SlackSpec {
            mode: SlackMode::Linear,
            c_r: None
        }
        .validate(3)
        .is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(schedule(0.001).validate().is_ok());
        assert!(schedule(-0.001).validate().is_err());
        assert!(schedule(0.0).validate().is_err());
        assert!(schedule(0.0).validate_nonneg().is_ok());
    }

    #[test]
    fn algorithm_names_parse() {
        assert_eq!("pdzdpg+".parse::<Algorithm>().unwrap(), Algorithm::PdZdpgPlus);
        assert_eq!("pdzdpg".parse::<Algorithm>().unwrap(), Algorithm::PdZdpg);
        assert!("ddpg".parse::<Algorithm>().is_err());
    }

    #[test]
    fn parameter_space_scalar_hand_check() {
        // policy(theta) = 2 theta, service f(a) = [a^2, 5 - a], no clipping.
        let set = BoxSet::unbounded(1);
        let dir = parameter_space_direction(
            |t| Ok(vec![2.0 * t[0]]),
            |a| Ok(vec![a[0] * a[0], 5.0 - a[0]]),
            &[1.5],
            &[0.8],
            0.1,
            &[0.7, 0.2],
            &set,
        )
        .unwrap();
        let a0 = 3.0;
        let a1 = 2.0 * (1.5 + 0.1 * 0.8);
        let d0 = (a1 * a1 - a0 * a0) / 0.1;
        let d1 = ((5.0 - a1) - (5.0 - a0)) / 0.1;
        let expect = (0.7 * d0 + 0.2 * d1) * 0.8;
        assert!((dir[0] - expect).abs() < 1e-12, "{} vs {expect}", dir[0]);
    }

    #[test]
    fn learner_rejects_inconsistent_shapes() {
        let spec = ServiceSpec {
            kind: ServiceKind::Awgn,
            weights: vec![0.5, 0.5],
            noise: vec![1.0; 2],
            p_max: 20.0,
            n_users: 2,
        };
        let problem = Problem::new(spec, ChannelDist::exponential(0.5, 2).unwrap()).unwrap();
        let arch = Arc::new(
            CompositePolicy::per_user(MlpSpec::new(vec![1, 2, 1], 20.0).unwrap(), 2).unwrap(),
        );
        let params = PolicyParams::init(arch, InitScheme::Zeros, &mut seeded(0));
        let config = LearnerConfig {
            algo: Algorithm::PdZdpgPlus,
            smoothing: SmoothingParams { mu_s: 0.1, mu_r: 0.1 },
            mu_theta: 0.1,
            slack: SlackSpec::default(),
            schedule: schedule(0.001),
            x_set: BoxSet::nonneg(2),
        };
        let bad_lambda = LearnerState {
            x: vec![1.0; 2],
            params: params.clone(),
            lambda_s: vec![],
            lambda_r: vec![1.0; 2],
            iter: 0,
        };
        assert!(Learner::new(
            problem.clone(),
            Utility::linear(vec![0.5, 0.5]),
            config.clone(),
            bad_lambda,
            seeded(0)
        )
        .is_err());
        let mut zero_mu = config;
        zero_mu.smoothing.mu_r = 0.0;
        let ok_state = LearnerState {
            x: vec![1.0; 2],
            params,
            lambda_s: vec![],
            lambda_r: vec![1.0; 3],
            iter: 0,
        };
        assert!(Learner::new(
            problem,
            Utility::linear(vec![0.5, 0.5]),
            zero_mu,
            ok_state,
            seeded(0)
        )
        .is_err());
    }
}
