//! Gaussian perturbations, box projections and two-point finite differences.
//!
//! The Monte-Carlo oracles here ([`smoothed_value_mc`], [`smoothed_grad_mc`])
//! are verification tools; the training loop only uses [`sample_gaussian`],
//! [`project_box`] and [`finite_diff`].

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Smoothing radii for the utility (state) space and the action space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingParams {
    pub mu_s: f64,
    pub mu_r: f64,
}

impl SmoothingParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mu_s", self.mu_s), ("mu_r", self.mu_r)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Axis-aligned box `{ v : lower <= v <= upper }`; bounds may be infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_len("box bounds", lower.len(), upper.len())?;
        for (i, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(Error::invalid(
                    "box",
                    format!("coordinate {i}: lower {lo} > upper {hi}"),
                ));
            }
        }
        Ok(BoxSet { lower, upper })
    }

    /// `[lo, hi]^dim`
    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        BoxSet::new(vec![lo; dim], vec![hi; dim])
    }

    /// The nonnegative orthant.
    pub fn nonneg(dim: usize) -> Self {
        BoxSet {
            lower: vec![0.0; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    pub fn unbounded(dim: usize) -> Self {
        BoxSet {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        v.len() == self.dim()
            && v
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (lo, hi))| lo <= x && x <= hi)
    }

    /// Clamp `v` into the box in place. Returns the number of coordinates
    /// that were clipped at a finite upper bound.
    pub fn project_in_place(&self, v: &mut [f64]) -> Result<usize> {
        check_len("projection", self.dim(), v.len())?;
        let mut upper_hits = 0;
        for (x, (&lo, &hi)) in v.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            if *x < lo {
                *x = lo;
            } else if *x > hi {
                *x = hi;
                upper_hits += 1;
            }
        }
        Ok(upper_hits)
    }
}

/// Vector of two-point finite differences, one entry per function component.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffVec(pub Vec<f64>);

impl FiniteDiffVec {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, weights: &[f64]) -> Result<f64> {
        check_len("finite difference weights", self.0.len(), weights.len())?;
        Ok(self.0.iter().zip(weights).map(|(d, w)| d * w).sum())
    }
}

/// `dim` i.i.d. standard normal draws.
pub fn sample_gaussian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn fill_gaussian<R: Rng + ?Sized>(out: &mut [f64], rng: &mut R) {
    for u in out.iter_mut() {
        *u = rng.sample(StandardNormal);
    }
}

pub fn project_box(v: &[f64], set: &BoxSet) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    set.project_in_place(&mut out)?;
    Ok(out)
}

/// `(perturbed - base) / mu`, coordinatewise.
pub fn finite_diff(base: &[f64], perturbed: &[f64], mu: f64) -> Result<FiniteDiffVec> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::invalid("mu", format!("finite difference radius must be > 0, got {mu}")));
    }
    check_len("finite difference", base.len(), perturbed.len())?;
    Ok(FiniteDiffVec(
        base.iter()
            .zip(perturbed)
            .map(|(b, p)| (p - b) / mu)
            .collect(),
    ))
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McVecEstimate {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

/// Running mean/variance (Welford).
#[derive(Debug, Clone, Default)]
pub struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero with fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        (self.variance() / self.n as f64).sqrt()
    }

    pub fn estimate(&self) -> McEstimate {
        McEstimate {
            value: self.mean(),
            stderr: self.stderr(),
        }
    }
}

fn check_mc_args(x: &[f64], set: &BoxSet, mu: f64, n_samples: usize) -> Result<()> {
    check_len("smoothing point", set.dim(), x.len())?;
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::invalid("mu", format!("must be > 0, got {mu}")));
    }
    if n_samples == 0 {
        return Err(Error::invalid("n_samples", "must be >= 1"));
    }
    Ok(())
}

/// Monte-Carlo estimate of `E f(Π{x + mu U})`, `U ~ N(0, I)`.
pub fn smoothed_value_mc<F, R>(
    mut f: F,
    x: &[f64],
    set: &BoxSet,
    mu: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<McEstimate>
where
    F: FnMut(&[f64]) -> Result<f64>,
    R: Rng + ?Sized,
{
    check_mc_args(x, set, mu, n_samples)?;
    let mut acc = Welford::default();
    let mut u = vec![0.0; x.len()];
    let mut point = vec![0.0; x.len()];
    for _ in 0..n_samples {
        fill_gaussian(&mut u, rng);
        for ((p, xi), ui) in point.iter_mut().zip(x).zip(&u) {
            *p = xi + mu * ui;
        }
        set.project_in_place(&mut point)?;
        acc.push(f(&point)?);
    }
    Ok(acc.estimate())
}

/// Monte-Carlo average of the one-sample gradient estimates
/// `(f(Π{x + mu U}) - f(x)) / mu * U`.
pub fn smoothed_grad_mc<F, R>(
    mut f: F,
    x: &[f64],
    set: &BoxSet,
    mu: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<McVecEstimate>
where
    F: FnMut(&[f64]) -> Result<f64>,
    R: Rng + ?Sized,
{
    check_mc_args(x, set, mu, n_samples)?;
    let base = f(x)?;
    let mut acc = vec![Welford::default(); x.len()];
    let mut u = vec![0.0; x.len()];
    let mut point = vec![0.0; x.len()];
    for _ in 0..n_samples {
        fill_gaussian(&mut u, rng);
        for ((p, xi), ui) in point.iter_mut().zip(x).zip(&u) {
            *p = xi + mu * ui;
        }
        set.project_in_place(&mut point)?;
        let delta = (f(&point)? - base) / mu;
        for (a, ui) in acc.iter_mut().zip(&u) {
            a.push(delta * ui);
        }
    }
    Ok(McVecEstimate {
        mean: acc.iter().map(Welford::mean).collect(),
        stderr: acc.iter().map(Welford::stderr).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn gaussian_is_reproducible_and_seed_separated() {
        let a = sample_gaussian(3, &mut seeded(11));
        let b = sample_gaussian(3, &mut seeded(11));
        let c = sample_gaussian(3, &mut seeded(12));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = seeded(5);
        let mut w = Welford::default();
        for u in sample_gaussian(1_000_000, &mut rng) {
            w.push(u);
        }
        assert!(w.mean().abs() < 0.01, "mean {}", w.mean());
        assert!((w.variance() - 1.0).abs() < 0.01, "var {}", w.variance());
    }

    #[test]
    fn projection_examples() {
        let set = BoxSet::uniform(2, 0.0, 20.0).unwrap();
        assert_eq!(project_box(&[-1.0, 25.0], &set).unwrap(), vec![0.0, 20.0]);
        assert_eq!(project_box(&[5.0, 5.0], &set).unwrap(), vec![5.0, 5.0]);
        assert!(matches!(
            project_box(&[1.0], &set),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn box_rejects_inverted_bounds() {
        assert!(BoxSet::new(vec![1.0], vec![0.0]).is_err());
        assert!(BoxSet::new(vec![0.0], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn finite_diff_examples() {
        assert_eq!(finite_diff(&[1.0], &[1.0], 0.1).unwrap().0, vec![0.0]);
        assert_eq!(finite_diff(&[2.0], &[2.5], 0.5).unwrap().0, vec![1.0]);
        assert!(finite_diff(&[1.0], &[1.0], 0.0).is_err());
        assert!(finite_diff(&[1.0], &[1.0], -0.1).is_err());
    }

    #[test]
    fn finite_diff_of_linear_function_is_exact() {
        let c = [0.3, -1.2, 2.0];
        let a = [1.0, 2.0, 3.0];
        let mut rng = seeded(3);
        for &mu in &[1e-3, 0.1, 7.0] {
            let u = sample_gaussian(3, &mut rng);
            let pert: Vec<f64> = a.iter().zip(&u).map(|(x, ui)| x + mu * ui).collect();
            let d = finite_diff(&[dot(&c, &a)], &[dot(&c, &pert)], mu).unwrap();
            assert!((d.0[0] - dot(&c, &u)).abs() < 1e-9 * (1.0 + 1.0 / mu));
        }
    }

    #[test]
    fn smoothing_constant_function() {
        let set = BoxSet::nonneg(4);
        let est =
            smoothed_value_mc(|_| Ok(3.5), &[1.0; 4], &set, 0.7, 100, &mut seeded(1)).unwrap();
        assert_eq!(est.value, 3.5);
        assert_eq!(est.stderr, 0.0);
        let g = smoothed_grad_mc(|_| Ok(3.5), &[1.0; 4], &set, 0.7, 1000, &mut seeded(1)).unwrap();
        assert!(g.mean.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn smoothing_leaves_linear_functions_unchanged() {
        let w = [0.5, -2.0, 1.5];
        let x = [0.2, 1.0, -3.0];
        let set = BoxSet::unbounded(3);
        let est = smoothed_value_mc(|p| Ok(dot(&w, p)), &x, &set, 0.5, 20_000, &mut seeded(9))
            .unwrap();
        assert!((est.value - dot(&w, &x)).abs() <= 3.0 * est.stderr);

        let g = smoothed_grad_mc(|p| Ok(dot(&w, p)), &x, &set, 0.5, 200_000, &mut seeded(9))
            .unwrap();
        for i in 0..3 {
            assert!(
                (g.mean[i] - w[i]).abs() <= 3.0 * g.stderr[i],
                "coord {i}: {} vs {} (se {})",
                g.mean[i],
                w[i],
                g.stderr[i]
            );
        }
    }

    #[test]
    fn concave_smoothing_underestimates() {
        // f(x) = -|x|^2 + sum(x): concave, smoothing shifts it down by mu^2 * dim.
        let f = |p: &[f64]| Ok(p.iter().map(|v| v - v * v).sum::<f64>());
        let set = BoxSet::unbounded(2);
        let mut rng = seeded(21);
        for x in [[0.0, 0.0], [1.0, -2.0], [0.5, 0.5]] {
            let fx = f(&x).unwrap();
            let est = smoothed_value_mc(f, &x, &set, 0.3, 20_000, &mut rng).unwrap();
            assert!(est.value <= fx + 3.0 * est.stderr);
        }
    }

    #[test]
    fn smoothed_gradient_of_quadratic() {
        // f(x) = -x'Ax + b'x, gradient -2Ax + b survives Gaussian smoothing.
        let a = [[2.0, 0.5], [0.5, 1.0]];
        let b = [1.0, -1.0];
        let f = move |p: &[f64]| {
            let quad: f64 = (0..2)
                .map(|i| (0..2).map(|j| p[i] * a[i][j] * p[j]).sum::<f64>())
                .sum();
            Ok(-quad + dot(&b, p))
        };
        let x = [0.3, -0.4];
        let expect: Vec<f64> = (0..2)
            .map(|i| -2.0 * (a[i][0] * x[0] + a[i][1] * x[1]) + b[i])
            .collect();
        let set = BoxSet::unbounded(2);
        let g = smoothed_grad_mc(f, &x, &set, 0.1, 400_000, &mut seeded(4)).unwrap();
        for i in 0..2 {
            assert!(
                (g.mean[i] - expect[i]).abs() <= 3.0 * g.stderr[i],
                "{:?} vs {:?}",
                g,
                expect
            );
        }

        // Gradient identity: the one-point estimator agrees with a central
        // difference of the smoothed value (common random numbers).
        let h = 1e-3;
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let vp = smoothed_value_mc(f, &xp, &set, 0.1, 100_000, &mut seeded(77)).unwrap();
            let vm = smoothed_value_mc(f, &xm, &set, 0.1, 100_000, &mut seeded(77)).unwrap();
            let fd = (vp.value - vm.value) / (2.0 * h);
            assert!(
                (g.mean[i] - fd).abs() <= 3.0 * g.stderr[i] + 0.01,
                "coord {i}: grad {} vs fd {}",
                g.mean[i],
                fd
            );
        }
    }

    #[test]
    fn mc_oracles_validate_arguments() {
        let set = BoxSet::nonneg(2);
        let mut rng = seeded(0);
        assert!(smoothed_value_mc(|_| Ok(0.0), &[1.0, 1.0], &set, 0.0, 10, &mut rng).is_err());
        assert!(smoothed_value_mc(|_| Ok(0.0), &[1.0, 1.0], &set, 0.1, 0, &mut rng).is_err());
        assert!(smoothed_grad_mc(|_| Ok(0.0), &[1.0], &set, 0.1, 10, &mut rng).is_err());
        let failing = smoothed_value_mc(
            |_| Err(Error::invalid("probe", "down")),
            &[1.0, 1.0],
            &set,
            0.1,
            10,
            &mut rng,
        );
        assert!(matches!(failing, Err(Error::InvalidParameter { name: "probe", .. })));
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_nonexpansive(
            u in prop::collection::vec(-50.0f64..50.0, 3),
            v in prop::collection::vec(-50.0f64..50.0, 3),
        ) {
            let set = BoxSet::new(vec![0.0, -1.0, f64::NEG_INFINITY], vec![20.0, 1.0, 0.0]).unwrap();
            let pu = project_box(&u, &set).unwrap();
            let pv = project_box(&v, &set).unwrap();
            prop_assert_eq!(project_box(&pu, &set).unwrap(), pu.clone());
            prop_assert!(set.contains(&pu));
            let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            prop_assert!(d(&pu, &pv) <= d(&u, &v) + 1e-12);
        }
    }
}
