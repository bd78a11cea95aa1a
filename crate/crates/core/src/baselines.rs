//! Model-based benchmarks: clairvoyant waterfilling for AWGN channels and
//! WMMSE for multiple-access interference.
//!
//! Both consume the channel distribution directly and are only used to put
//! the learned curves in context.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::{stream, Stream};
use crate::smoothing::{McEstimate, Welford};
use crate::systems::{mai_rates, ChannelDist, ServiceKind, ServiceSpec};

/// Sidecar written next to benchmark curves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub value: f64,
    pub stderr: f64,
    pub n_mc: u64,
    pub seed: u64,
}

/// Monte-Carlo draws of the channel, stored row by row so that every
/// evaluation inside a bisection sees the same samples.
#[derive(Debug, Clone)]
pub struct ChannelSamples {
    dim: usize,
    data: Vec<f64>,
}

impl ChannelSamples {
    pub fn draw(dist: &ChannelDist, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("n_mc", "need at least one sample"));
        }
        let mut rng = stream(seed, Stream::Benchmark);
        let mut data = vec![0.0; n * dist.dim];
        for row in data.chunks_mut(dist.dim) {
            dist.sample_into(row, &mut rng);
        }
        Ok(ChannelSamples {
            dim: dist.dim,
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::invalid("samples", "need at least one nonempty row"));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            check_len("channel sample", dim, r.len())?;
            if r.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
                return Err(Error::invalid("samples", "channel gains must be positive"));
            }
            data.extend_from_slice(r);
        }
        Ok(ChannelSamples { dim, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }
}

/// Optimal AWGN allocation under an average power budget:
/// `p_i(h) = max(0, w_i / nu - v_i / h_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaterfillSolution {
    pub nu: f64,
    pub weights: Vec<f64>,
    pub noise: Vec<f64>,
    pub p_max: f64,
    /// Ergodic weighted sum-rate on the samples.
    pub value: McEstimate,
    /// Average total power on the samples.
    pub expected_power: f64,
    pub bisection_iters: usize,
}

impl WaterfillSolution {
    pub fn policy(&self, h: &[f64]) -> Vec<f64> {
        water_levels(&self.weights, &self.noise, self.nu, h)
    }

    /// `|E[sum p] - p_max|` on the samples.
    pub fn budget_residual(&self) -> f64 {
        (self.expected_power - self.p_max).abs()
    }

    pub fn benchmark(&self, n_mc: u64, seed: u64) -> BenchmarkResult {
        BenchmarkResult {
            value: self.value.value,
            stderr: self.value.stderr,
            n_mc,
            seed,
        }
    }
}

fn water_levels(w: &[f64], v: &[f64], nu: f64, h: &[f64]) -> Vec<f64> {
    w.iter()
        .zip(v)
        .zip(h)
        .map(|((w, v), h)| (w / nu - v / h).max(0.0))
        .collect()
}

fn average_power(w: &[f64], v: &[f64], nu: f64, samples: &ChannelSamples) -> f64 {
    let total: f64 = samples
        .rows()
        .map(|h| {
            w.iter()
                .zip(v)
                .zip(h)
                .map(|((w, v), h)| (w / nu - v / h).max(0.0))
                .sum::<f64>()
        })
        .sum();
    total / samples.len() as f64
}

/// Waterfilling with the multiplier fitted to `samples` so that the average
/// power matches `p_max` within `tol * p_max`.
pub fn waterfill_from_samples(
    spec: &ServiceSpec,
    samples: &ChannelSamples,
    tol: f64,
) -> Result<WaterfillSolution> {
    spec.validate()?;
    if spec.kind != ServiceKind::Awgn {
        return Err(Error::invalid("service", "waterfilling needs an AWGN system"));
    }
    check_len("channel samples", spec.n_users, samples.dim())?;
    if !(tol > 0.0) {
        return Err(Error::invalid("tol", "must be > 0"));
    }
    let (w, v) = (&spec.weights, &spec.noise);
    let power = |nu: f64| average_power(w, v, nu, samples);
    let target = spec.p_max;

    // power(nu) is continuous and nonincreasing; bracket the root first.
    let mut lo = 1e-8;
    if power(lo) < target {
        return Err(Error::Bracket(format!(
            "average power at nu = {lo} is below the budget {target}"
        )));
    }
    let mut hi = 1.0;
    let mut grow = 0;
    while power(hi) > target {
        hi *= 2.0;
        grow += 1;
        if grow > 200 {
            return Err(Error::Bracket("could not bracket the water level".into()));
        }
    }
    let mut nu = hi;
    let mut iters = 0;
    for i in 0..500 {
        iters = i + 1;
        nu = 0.5 * (lo + hi);
        let p = power(nu);
        if (p - target).abs() <= tol * target {
            break;
        }
        if p > target {
            lo = nu;
        } else {
            hi = nu;
        }
    }
    let expected_power = power(nu);
    if (expected_power - target).abs() > tol * target {
        return Err(Error::Bracket(format!(
            "bisection stalled with budget residual {}",
            (expected_power - target).abs()
        )));
    }

    let mut acc = Welford::default();
    for h in samples.rows() {
        let p = water_levels(w, v, nu, h);
        let r: f64 = w
            .iter()
            .zip(v)
            .zip(h.iter().zip(&p))
            .map(|((w, v), (h, p))| w * (h * p / v).ln_1p())
            .sum();
        acc.push(r);
    }
    Ok(WaterfillSolution {
        nu,
        weights: w.clone(),
        noise: v.clone(),
        p_max: target,
        value: acc.estimate(),
        expected_power,
        bisection_iters: iters,
    })
}

/// Waterfilling against `n_mc` fresh draws from the benchmark stream of
/// `seed`.
pub fn waterfill_clairvoyant(
    spec: &ServiceSpec,
    dist: &ChannelDist,
    n_mc: usize,
    seed: u64,
    tol: f64,
) -> Result<WaterfillSolution> {
    let samples = ChannelSamples::draw(dist, n_mc, seed)?;
    waterfill_from_samples(spec, &samples, tol)
}

/// Largest improvement of the per-state Lagrangian
/// `sum_i w_i log(1 + h_i p_i / v_i) - nu p_i` found on a grid of
/// `[0, p_max]` with spacing `step`, relative to the water-level allocation.
/// Nonpositive (up to rounding) when the allocation is optimal.
pub fn waterfill_kkt_gap(sol: &WaterfillSolution, h: &[f64], step: f64) -> f64 {
    let p_star = sol.policy(h);
    let n_grid = (sol.p_max / step).floor() as usize;
    let mut worst = f64::NEG_INFINITY;
    for i in 0..h.len() {
        let (w, v) = (sol.weights[i], sol.noise[i]);
        let lag = |p: f64| w * (h[i] * p / v).ln_1p() - sol.nu * p;
        let at_star = lag(p_star[i]);
        for k in 0..=n_grid {
            worst = worst.max(lag(k as f64 * step) - at_star);
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WmmseConfig {
    pub max_iters: usize,
    /// Stop once the weighted sum-rate improves by less than this.
    pub tol: f64,
}

impl Default for WmmseConfig {
    fn default() -> Self {
        WmmseConfig {
            max_iters: 1000,
            tol: 1e-10,
        }
    }
}

/// Final WMMSE iterate for one channel state, with the objective and total
/// power after every iteration (index 0 is the equal-power start).
#[derive(Debug, Clone, PartialEq)]
pub struct WmmseIterate {
    pub powers: Vec<f64>,
    pub objective: f64,
    pub history: Vec<f64>,
    pub power_history: Vec<f64>,
}

impl WmmseIterate {
    pub fn iters(&self) -> usize {
        self.history.len() - 1
    }
}

fn weighted_mai_sumrate(spec: &ServiceSpec, h: &[f64], p: &[f64]) -> Result<f64> {
    Ok(spec.weighted_sumrate(&mai_rates(h, p, &spec.noise)?))
}

/// Smallest `nu >= 0` with `sum_i (a_i / (b_i + nu))^2 <= p_max`.
fn power_multiplier(a: &[f64], b: &[f64], p_max: f64) -> f64 {
    let total = |nu: f64| -> f64 {
        a.iter()
            .zip(b)
            .map(|(a, b)| {
                let t = a / (b + nu);
                t * t
            })
            .sum()
    };
    if total(0.0) <= p_max {
        return 0.0;
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while total(hi) > p_max {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if total(mid) > p_max {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // The upper end is always feasible.
    hi
}

/// Weighted MMSE for one channel state of the multiple-access system with
/// scalar (single-antenna) links and a sum-power budget.
pub fn wmmse_instant(spec: &ServiceSpec, h: &[f64], cfg: &WmmseConfig) -> Result<WmmseIterate> {
    spec.validate()?;
    if spec.kind != ServiceKind::Mai {
        return Err(Error::invalid("service", "WMMSE needs an interference system"));
    }
    check_len("channel", spec.n_users, h.len())?;
    let n = spec.n_users;
    let (w, sigma) = (&spec.weights, &spec.noise);
    let g: Vec<f64> = h.iter().map(|h| h.sqrt()).collect();
    let mut v = vec![(spec.p_max / n as f64).sqrt(); n];
    let mut p: Vec<f64> = v.iter().map(|v| v * v).collect();
    let mut obj = weighted_mai_sumrate(spec, h, &p)?;
    let mut history = vec![obj];
    let mut power_history = vec![p.iter().sum()];
    let mut u = vec![0.0; n];
    let mut wu = vec![0.0; n];
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];

    for _ in 0..cfg.max_iters {
        let received: f64 = h.iter().zip(&p).map(|(h, p)| h * p).sum();
        let mut interf_weight = 0.0;
        for i in 0..n {
            u[i] = g[i] * v[i] / (sigma[i] + received);
            let e = 1.0 - u[i] * g[i] * v[i];
            // e > 0 whenever the noise is positive.
            let omega = 1.0 / e;
            wu[i] = w[i] * omega;
            interf_weight += wu[i] * u[i] * u[i];
        }
        for i in 0..n {
            a[i] = wu[i] * u[i] * g[i];
            b[i] = h[i] * interf_weight;
        }
        let nu = power_multiplier(&a, &b, spec.p_max);
        for i in 0..n {
            v[i] = a[i] / (b[i] + nu);
            p[i] = v[i] * v[i];
        }
        let next = weighted_mai_sumrate(spec, h, &p)?;
        if !next.is_finite() {
            return Err(Error::NonFinite {
                iter: history.len() as u64,
                field: "wmmse objective",
            });
        }
        let improvement = next - obj;
        obj = next;
        history.push(obj);
        power_history.push(p.iter().sum());
        if improvement.abs() < cfg.tol {
            break;
        }
    }
    Ok(WmmseIterate {
        powers: p,
        objective: obj,
        history,
        power_history,
    })
}

/// Average of per-state WMMSE over the given samples, computed on up to
/// `threads` worker threads. The result does not depend on `threads`.
pub fn wmmse_on_samples(
    spec: &ServiceSpec,
    samples: &ChannelSamples,
    cfg: &WmmseConfig,
    threads: usize,
) -> Result<McEstimate> {
    check_len("channel samples", spec.n_users, samples.dim())?;
    let rows: Vec<&[f64]> = samples.rows().collect();
    let threads = threads.clamp(1, rows.len());
    let chunk = rows.len().div_ceil(threads);
    let values: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
        let handles: Vec<_> = rows
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|h| wmmse_instant(spec, h, cfg).map(|it| it.objective))
                        .collect::<Result<Vec<f64>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("wmmse worker panicked"))
            .collect()
    });
    let mut acc = Welford::default();
    for part in values {
        for v in part? {
            acc.push(v);
        }
    }
    Ok(acc.estimate())
}

/// Ergodic WMMSE benchmark over `n_mc` draws from the benchmark stream.
pub fn wmmse_ergodic(
    spec: &ServiceSpec,
    dist: &ChannelDist,
    n_mc: usize,
    seed: u64,
    cfg: &WmmseConfig,
) -> Result<McEstimate> {
    let samples = ChannelSamples::draw(dist, n_mc, seed)?;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    wmmse_on_samples(spec, &samples, cfg, threads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::systems::random_weights;
    use rand::Rng;

    fn awgn(n: usize, p_max: f64) -> ServiceSpec {
        ServiceSpec {
            kind: ServiceKind::Awgn,
            weights: vec![1.0 / n as f64; n],
            noise: vec![1.0; n],
            p_max,
            n_users: n,
        }
    }

    fn mai(weights: Vec<f64>) -> ServiceSpec {
        let n = weights.len();
        ServiceSpec {
            kind: ServiceKind::Mai,
            weights,
            noise: vec![1.0; n],
            p_max: 20.0,
            n_users: n,
        }
    }

    #[test]
    fn degenerate_unit_channel() {
        let spec = awgn(1, 3.0);
        let samples = ChannelSamples::from_rows(&[vec![1.0]]).unwrap();
        let sol = waterfill_from_samples(&spec, &samples, 1e-12).unwrap();
        assert!((sol.nu - 0.25).abs() < 1e-9, "nu = {}", sol.nu);
        assert!((sol.value.value - 4f64.ln()).abs() < 1e-9);
        assert!((sol.policy(&[1.0])[0] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn water_levels_cut_off_weak_states() {
        let spec = awgn(2, 1.0);
        let samples = ChannelSamples::from_rows(&[vec![4.0, 0.01], vec![2.0, 3.0]]).unwrap();
        let sol = waterfill_from_samples(&spec, &samples, 1e-10).unwrap();
        assert_eq!(sol.policy(&[4.0, 0.01])[1], 0.0);
        assert!(sol.budget_residual() <= 1e-10);
    }

    #[test]
    fn clairvoyant_budget_and_kkt() {
        let spec = awgn(3, 20.0);
        let dist = ChannelDist::exponential(0.5, 3).unwrap();
        let sol = waterfill_clairvoyant(&spec, &dist, 20_000, 3, 1e-9).unwrap();
        assert!(sol.budget_residual() <= 1e-3 * spec.p_max);
        let mut rng = seeded(9);
        for _ in 0..20 {
            let h = dist.sample(&mut rng);
            assert!(waterfill_kkt_gap(&sol, &h, 1e-3) <= 1e-12);
        }
    }

    #[test]
    fn waterfill_rejects_mai() {
        let spec = mai(vec![0.5, 0.5]);
        let samples = ChannelSamples::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert!(waterfill_from_samples(&spec, &samples, 1e-6).is_err());
    }

    #[test]
    fn wmmse_single_user_uses_full_power() {
        let spec = mai(vec![1.0]);
        let it = wmmse_instant(&spec, &[2.0], &WmmseConfig::default()).unwrap();
        assert!((it.powers[0] - 20.0).abs() < 1e-6);
        assert!((it.objective - 41f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn wmmse_monotone_and_feasible() {
        let mut rng = seeded(4);
        for _ in 0..30 {
            let n = rng.random_range(2..8);
            let spec = mai(random_weights(n, &mut rng));
            let h: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..6.0)).collect();
            let it = wmmse_instant(&spec, &h, &WmmseConfig::default()).unwrap();
            for pair in it.history.windows(2) {
                assert!(pair[1] - pair[0] >= -1e-9, "{:?}", it.history);
            }
            for p in &it.power_history {
                assert!(*p <= spec.p_max * (1.0 + 1e-12));
            }
            assert!(it.objective >= it.history[0]);
        }
    }

    #[test]
    fn wmmse_parallel_matches_serial() {
        let spec = mai(vec![0.3, 0.3, 0.4]);
        let dist = ChannelDist::exponential(0.5, 3).unwrap();
        let samples = ChannelSamples::draw(&dist, 200, 1).unwrap();
        let cfg = WmmseConfig::default();
        let a = wmmse_on_samples(&spec, &samples, &cfg, 1).unwrap();
        let b = wmmse_on_samples(&spec, &samples, &cfg, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn samples_are_reproducible() {
        let dist = ChannelDist::exponential(0.5, 4).unwrap();
        let a = ChannelSamples::draw(&dist, 10, 5).unwrap();
        let b = ChannelSamples::draw(&dist, 10, 5).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.len(), 10);
    }
}
