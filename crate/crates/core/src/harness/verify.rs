//! Self-verification suite run by `pdzdpg verify`.
//!
//! The fast suite covers deterministic and cheap Monte-Carlo checks; the
//! full suite adds the statistical checks of the smoothing bounds and of the
//! action-space policy-gradient estimator.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;

use super::config::ExperimentConfig;
use super::experiment::build_learner;
use super::timing::mai_timing_config;
use crate::baselines::{
    waterfill_clairvoyant, waterfill_kkt_gap, wmmse_instant, WmmseConfig,
};
use crate::error::Result;
use crate::learner::{action_space_direction, Algorithm};
use crate::policy::{CompositePolicy, MlpSpec, PolicyParams};
use crate::rng::{stream, Stream};
use crate::smoothing::{fill_gaussian, smoothed_value_mc, BoxSet, Welford};
use crate::systems::{
    random_weights, ChannelDist, Problem, ServiceKind, ServiceSpec, System,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Fast,
    Full,
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub suite: Suite,
    pub seed: u64,
    /// Fault injection: perturb every VJP result before checking it.
    pub corrupt_vjp: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            suite: Suite::Fast,
            seed: 20240,
            corrupt_vjp: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub millis: u128,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult {
        name,
        passed,
        detail,
        millis: start.elapsed().as_millis(),
    }
}

pub fn verify(opts: &VerifyOptions) -> Vec<CheckResult> {
    let s = opts.seed;
    let mut out = vec![
        check("vjp_gradient_check", || {
            let r = vjp_fd_check(20, s, opts.corrupt_vjp)?;
            Ok((
                r.max_rel_err <= 1e-5,
                format!(
                    "max rel err {:.2e} over {} nets ({} kinked draws skipped)",
                    r.max_rel_err, r.checked, r.skipped
                ),
            ))
        }),
        check("projection_properties", || projection_check(s)),
        check("waterfill_oracle", || waterfill_check(s)),
        check("wmmse_oracle", || wmmse_check(100, s)),
        check("learner_cost_structure", cost_structure_check),
        check("run_determinism", || determinism_check(s)),
    ];
    if opts.suite == Suite::Full {
        out.push(check("smoothing_bias_and_second_moment", || {
            let r = smoothing_bound_check(1000, 2000, s)?;
            Ok((
                r.violations == 0,
                format!(
                    "{} violations over {} points; worst bias ratio {:.3}, worst moment ratio {:.3}",
                    r.violations, r.points, r.worst_bias_ratio, r.worst_moment_ratio
                ),
            ))
        }));
        out.push(check("policy_gradient_consistency", || {
            let r = policy_gradient_consistency(200_000, s)?;
            Ok((
                r.rel_err <= 0.05,
                format!("relative error {:.4} (norm {:.4e})", r.rel_err, r.reference_norm),
            ))
        }));
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy)]
pub struct VjpCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Compare reverse-mode VJPs with central differences on random small
/// nets. Draws with any hidden pre-activation within `1e-3` of a ReLU kink
/// are redrawn.
pub fn vjp_fd_check(n_nets: usize, seed: u64, corrupt: bool) -> Result<VjpCheck> {
    let mut rng = stream(seed, Stream::Verify);
    let eps = 1e-6;
    let mut worst = 0.0f64;
    let (mut checked, mut skipped) = (0, 0);
    while checked < n_nets {
        let n_in = rng.random_range(1..4);
        let n_out = rng.random_range(1..4);
        let mut sizes = vec![n_in];
        for _ in 0..rng.random_range(1..3) {
            sizes.push(rng.random_range(1..7));
        }
        sizes.push(n_out);
        let arch = Arc::new(CompositePolicy::single(MlpSpec::new(sizes, 20.0)?)?);
        let theta: Vec<f64> = (0..arch.n_params())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let h: Vec<f64> = (0..n_in).map(|_| rng.random_range(0.1..3.0)).collect();
        let mut cot = vec![0.0; n_out];
        fill_gaussian(&mut cot, &mut rng);
        if arch
            .hidden_preactivations(&theta, &h)?
            .iter()
            .any(|z| z.abs() < 1e-3)
        {
            skipped += 1;
            continue;
        }
        let mut g = arch.vjp(&theta, &h, &cot)?;
        if corrupt {
            g[0] += 1e-2 * (1.0 + g[0].abs());
        }
        let dot = |t: &[f64]| -> Result<f64> {
            Ok(arch.forward(t, &h)?.iter().zip(&cot).map(|(a, c)| a * c).sum())
        };
        let mut fd = vec![0.0; theta.len()];
        let mut t = theta.clone();
        for j in 0..theta.len() {
            t[j] = theta[j] + eps;
            let up = dot(&t)?;
            t[j] = theta[j] - eps;
            let down = dot(&t)?;
            t[j] = theta[j];
            fd[j] = (up - down) / (2.0 * eps);
        }
        let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
        worst = worst.max(norm(&diff) / norm(&fd).max(1e-8));
        checked += 1;
    }
    Ok(VjpCheck {
        max_rel_err: worst,
        checked,
        skipped,
    })
}

fn projection_check(seed: u64) -> Result<(bool, String)> {
    let mut rng = stream(seed, Stream::Verify);
    let set = BoxSet::uniform(5, 0.0, 20.0)?;
    let mut bad = 0;
    for _ in 0..1000 {
        let u: Vec<f64> = (0..5).map(|_| rng.random_range(-30.0..50.0)).collect();
        let v: Vec<f64> = (0..5).map(|_| rng.random_range(-30.0..50.0)).collect();
        let (mut pu, mut pv) = (u.clone(), v.clone());
        set.project_in_place(&mut pu)?;
        set.project_in_place(&mut pv)?;
        let mut ppu = pu.clone();
        set.project_in_place(&mut ppu)?;
        let d_in: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a - b).collect();
        let d_out: Vec<f64> = pu.iter().zip(&pv).map(|(a, b)| a - b).collect();
        if ppu != pu || norm(&d_out) > norm(&d_in) + 1e-12 {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("{bad} failures over 1000 random pairs")))
}

fn waterfill_check(seed: u64) -> Result<(bool, String)> {
    let spec = ServiceSpec {
        kind: ServiceKind::Awgn,
        weights: random_weights(4, &mut stream(seed, Stream::Weights)),
        noise: vec![1.0; 4],
        p_max: 20.0,
        n_users: 4,
    };
    let dist = ChannelDist::exponential(0.5, 4)?;
    let sol = waterfill_clairvoyant(&spec, &dist, 20_000, seed, 1e-6)?;
    let mut rng = stream(seed, Stream::Verify);
    let mut gap = f64::NEG_INFINITY;
    for _ in 0..20 {
        gap = gap.max(waterfill_kkt_gap(&sol, &dist.sample(&mut rng), 1e-3));
    }
    let residual = sol.budget_residual();
    Ok((
        residual <= 1e-3 * spec.p_max && gap <= 1e-9,
        format!("budget residual {residual:.2e}, worst grid improvement {gap:.2e}"),
    ))
}

fn wmmse_check(n: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = stream(seed, Stream::Verify);
    let cfg = WmmseConfig::default();
    let (mut worst_drop, mut worst_power) = (0.0f64, f64::NEG_INFINITY);
    for _ in 0..n {
        let users = rng.random_range(2..11);
        let spec = ServiceSpec {
            kind: ServiceKind::Mai,
            weights: random_weights(users, &mut rng),
            noise: vec![1.0; users],
            p_max: 20.0,
            n_users: users,
        };
        let dist = ChannelDist::exponential(0.5, users)?;
        let it = wmmse_instant(&spec, &dist.sample(&mut rng), &cfg)?;
        for w in it.history.windows(2) {
            worst_drop = worst_drop.min(w[1] - w[0]);
        }
        for p in &it.power_history {
            worst_power = worst_power.max(p - spec.p_max);
        }
    }
    Ok((
        worst_drop >= -1e-9 && worst_power <= 1e-9,
        format!("worst step change {worst_drop:.2e}, worst budget excess {worst_power:.2e}"),
    ))
}

fn cost_structure_check() -> Result<(bool, String)> {
    let cfg = mai_timing_config(3, vec![6]);
    let mut ok = true;
    let mut detail = Vec::new();
    for (algo, vjps) in [(Algorithm::PdZdpgPlus, 1), (Algorithm::PdZdpg, 0)] {
        let c = cfg.with_algo(algo)?;
        let mut l = build_learner(&c, 0)?;
        let n_params = l.state().params.len();
        let out = l.step()?;
        let dim = if algo == Algorithm::PdZdpgPlus { 3 } else { n_params };
        ok &= out.probes == 3 && out.vjps == vjps && out.perturbation_dim == dim;
        detail.push(format!(
            "{}: {} probes, {} vjps, dim {}",
            algo.name(),
            out.probes,
            out.vjps,
            out.perturbation_dim
        ));
    }
    Ok((ok, detail.join("; ")))
}

fn short_run(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<crate::harness::RunRecord>> {
    let mut l = build_learner(cfg, seed)?;
    let mut out = Vec::new();
    l.run(cfg.n_iters, seed, cfg.ma_window, false, |r| {
        out.push(*r);
        Ok(())
    })?;
    Ok(out)
}

fn determinism_check(seed: u64) -> Result<(bool, String)> {
    let mut cfg = mai_timing_config(4, vec![8]);
    cfg.n_iters = 300;
    cfg.ma_window = 50;
    let a = short_run(&cfg, seed)?;
    let b = short_run(&cfg, seed)?;
    let c = short_run(&cfg, seed + 1)?;
    let same = a == b;
    let differs = a != c;
    Ok((
        same && differs,
        format!("rerun identical: {same}; other seed differs: {differs}"),
    ))
}

#[derive(Debug, Clone, Copy)]
pub struct SmoothingBoundCheck {
    pub points: usize,
    pub violations: usize,
    /// Largest `|g_mu - g| / (mu L sqrt(N))` seen.
    pub worst_bias_ratio: f64,
    /// Largest `E||Δ_g U||^2 / (L^2 (N + 4)^2)` seen.
    pub worst_moment_ratio: f64,
}

/// Lipschitz test utility `g(x) = L sum_i min(x_i, cap) / sqrt(N)`.
pub fn capped_linear(x: &[f64], lip: f64, cap: f64) -> f64 {
    lip * x.iter().map(|v| v.min(cap)).sum::<f64>() / (x.len() as f64).sqrt()
}

/// Smoothing bias and second-moment bounds on [`capped_linear`] at
/// `points` random states, `n_mc` Gaussian draws each, with a
/// three-standard-error allowance.
///
/// The one-sided underestimate check uses unprojected perturbations:
/// concavity gives `g_mu <= g` there, whereas clipping onto the orthant can
/// raise a nondecreasing utility above `g` near the boundary. The two-sided
/// bound and the second moment are checked with the projection in place.
pub fn smoothing_bound_check(points: usize, n_mc: usize, seed: u64) -> Result<SmoothingBoundCheck> {
    let (n, lip, cap, mu) = (4usize, 2.0, 1.5, 0.1);
    let mut rng = stream(seed, Stream::Verify);
    let orthant = BoxSet::nonneg(n);
    let bias_bound = mu * lip * (n as f64).sqrt();
    let moment_bound = lip * lip * ((n + 4) as f64).powi(2);
    let g = |x: &[f64]| Ok(capped_linear(x, lip, cap));
    let mut out = SmoothingBoundCheck {
        points,
        violations: 0,
        worst_bias_ratio: 0.0,
        worst_moment_ratio: 0.0,
    };
    let mut u = vec![0.0; n];
    let mut p = vec![0.0; n];
    for _ in 0..points {
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let gx = capped_linear(&x, lip, cap);

        // Antithetic pairs: each (g(x + mu u) + g(x - mu u)) / 2 is already
        // <= g(x) by concavity, so regions where g is linear cannot fail on
        // noise alone.
        let mut free_est = Welford::default();
        for _ in 0..n_mc / 2 {
            fill_gaussian(&mut u, &mut rng);
            let plus: Vec<f64> = x.iter().zip(&u).map(|(xi, ui)| xi + mu * ui).collect();
            let minus: Vec<f64> = x.iter().zip(&u).map(|(xi, ui)| xi - mu * ui).collect();
            free_est.push(0.5 * (capped_linear(&plus, lip, cap) + capped_linear(&minus, lip, cap)));
        }
        let under_ok = free_est.mean() - gx <= 3.0 * free_est.stderr() + 1e-12;

        let proj_est = smoothed_value_mc(g, &x, &orthant, mu, n_mc, &mut rng)?;
        let bias = (proj_est.value - gx).abs();
        let bias_ok = bias <= bias_bound + 3.0 * proj_est.stderr;

        let mut moment = Welford::default();
        for _ in 0..n_mc {
            fill_gaussian(&mut u, &mut rng);
            for ((pi, xi), ui) in p.iter_mut().zip(&x).zip(&u) {
                *pi = xi + mu * ui;
            }
            orthant.project_in_place(&mut p)?;
            let d = (capped_linear(&p, lip, cap) - gx) / mu;
            moment.push(d * d * u.iter().map(|v| v * v).sum::<f64>());
        }
        let moment_ok = moment.mean() <= moment_bound + 3.0 * moment.stderr();

        out.worst_bias_ratio = out.worst_bias_ratio.max(bias / bias_bound);
        out.worst_moment_ratio = out.worst_moment_ratio.max(moment.mean() / moment_bound);
        if !(under_ok && bias_ok && moment_ok) {
            out.violations += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConsistencyReport {
    pub estimate: Vec<f64>,
    pub reference: Vec<f64>,
    pub reference_norm: f64,
    pub rel_err: f64,
}

/// Single-user AWGN with a `1-2-1` policy whose parameters and multipliers
/// stay frozen. Averages `n` action-space gradient samples and compares them
/// with a central difference (common random numbers) of the Monte-Carlo
/// smoothed Lagrangian.
pub fn policy_gradient_consistency(n: usize, seed: u64) -> Result<ConsistencyReport> {
    let spec = ServiceSpec {
        kind: ServiceKind::Awgn,
        weights: vec![1.0],
        noise: vec![1.0],
        p_max: 20.0,
        n_users: 1,
    };
    let problem = Problem::new(spec, ChannelDist::exponential(0.5, 1)?)?;
    let arch = Arc::new(CompositePolicy::single(MlpSpec::new(vec![1, 2, 1], 20.0)?)?);
    let params = PolicyParams::from_flat(arch, vec![0.8, 0.5, 0.1, 0.2, 0.6, -0.4, -0.5])?;
    let lambda = [1.0, 0.02];
    let mu = 0.1;

    let mut rng = stream(seed, Stream::Verify);
    let mut acc = vec![0.0; params.len()];
    let mut u = [0.0];
    for _ in 0..n {
        fill_gaussian(&mut u, &mut rng);
        let h = problem.sample_channel(&mut rng);
        let d = action_space_direction(&params, &problem, &h, &u, mu, &lambda)?;
        for (a, v) in acc.iter_mut().zip(d) {
            *a += v;
        }
    }
    let estimate: Vec<f64> = acc.iter().map(|a| a / n as f64).collect();

    let mut states = Vec::with_capacity(n);
    for _ in 0..n {
        fill_gaussian(&mut u, &mut rng);
        states.push((problem.sample_channel(&mut rng), u[0]));
    }
    let lagrangian = |theta: &[f64]| -> Result<f64> {
        let p = PolicyParams::from_flat(params.arch().clone(), theta.to_vec())?;
        let mut total = 0.0;
        for (h, u) in &states {
            let mut a = p.forward(h)?;
            a[0] += mu * u;
            problem.action_set().project_in_place(&mut a)?;
            let f = problem.probe(&a, h)?;
            total += lambda[0] * f[0] + lambda[1] * f[1];
        }
        Ok(total / states.len() as f64)
    };
    let eps = 1e-4;
    let mut reference = vec![0.0; params.len()];
    let mut t = params.theta().to_vec();
    for j in 0..t.len() {
        let orig = t[j];
        t[j] = orig + eps;
        let up = lagrangian(&t)?;
        t[j] = orig - eps;
        let down = lagrangian(&t)?;
        t[j] = orig;
        reference[j] = (up - down) / (2.0 * eps);
    }
    let diff: Vec<f64> = estimate.iter().zip(&reference).map(|(a, b)| a - b).collect();
    let reference_norm = norm(&reference);
    Ok(ConsistencyReport {
        rel_err: norm(&diff) / reference_norm,
        estimate,
        reference,
        reference_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_suite_passes() {
        for r in verify(&VerifyOptions::default()) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn corrupted_vjp_is_caught_by_name() {
        let opts = VerifyOptions {
            corrupt_vjp: true,
            ..VerifyOptions::default()
        };
        let failed: Vec<_> = verify(&opts)
            .into_iter()
            .filter(|r| !r.passed)
            .map(|r| r.name)
            .collect();
        assert_eq!(failed, vec!["vjp_gradient_check"]);
    }

    #[test]
    fn smoothing_bounds_hold_across_seeds() {
        for seed in 0..20 {
            let r = smoothing_bound_check(200, 400, seed).unwrap();
            assert_eq!(r.violations, 0, "seed {seed}: {r:?}");
        }
    }
}
