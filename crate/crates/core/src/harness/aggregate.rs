//! Mean curves across seeds with percentile-bootstrap bands.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::experiment::parse_csv_name;
use super::record::{read_run_csv, RunRecord, METRICS};
use crate::error::{Error, Result};
use crate::rng::seeded;

pub const AGGREGATE_HEADER: &str = "iter,metric,mean,lo,hi";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub iter: u64,
    pub metric: String,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Linear-interpolation quantile of sorted data (`q` in `[0, 1]`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    }
}

/// Resample whole runs with replacement `n_boot` times; for every iteration
/// and metric report the across-run mean and the `(1 - level) / 2` and
/// `(1 + level) / 2` percentiles of the resampled means.
pub fn aggregate_runs(
    runs: &[Vec<RunRecord>],
    n_boot: usize,
    level: f64,
    seed: u64,
) -> Result<Vec<AggregateRow>> {
    if runs.len() < 2 {
        return Err(Error::Aggregate(format!(
            "need at least 2 runs, got {}",
            runs.len()
        )));
    }
    if n_boot == 0 {
        return Err(Error::Aggregate("n_boot must be >= 1".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Aggregate(format!("level must be in (0, 1), got {level}")));
    }
    let grid: Vec<u64> = runs[0].iter().map(|r| r.iter).collect();
    for (k, run) in runs.iter().enumerate().skip(1) {
        if run.len() != grid.len() || run.iter().zip(&grid).any(|(r, g)| r.iter != *g) {
            return Err(Error::Aggregate(format!(
                "run {k} has a different iteration grid"
            )));
        }
    }

    let n = runs.len();
    let mut rng = seeded(seed);
    let resamples: Vec<Vec<usize>> = (0..n_boot)
        .map(|_| (0..n).map(|_| rng.random_range(0..n)).collect())
        .collect();
    let (q_lo, q_hi) = ((1.0 - level) / 2.0, (1.0 + level) / 2.0);

    let mut rows = Vec::with_capacity(grid.len() * METRICS.len());
    let mut values = vec![0.0; n];
    let mut boot = vec![0.0; n_boot];
    for (t, &iter) in grid.iter().enumerate() {
        for metric in METRICS {
            for (v, run) in values.iter_mut().zip(runs) {
                *v = run[t].metric(metric).expect("known metric");
            }
            let mean = values.iter().sum::<f64>() / n as f64;
            for (b, idx) in boot.iter_mut().zip(&resamples) {
                *b = idx.iter().map(|&i| values[i]).sum::<f64>() / n as f64;
            }
            boot.sort_by(f64::total_cmp);
            // Rounding in the resampled means can put a degenerate band a
            // hair off the mean.
            let lo = quantile_sorted(&boot, q_lo).min(mean);
            let hi = quantile_sorted(&boot, q_hi).max(mean);
            rows.push(AggregateRow {
                iter,
                metric: metric.to_owned(),
                mean,
                lo,
                hi,
            });
        }
    }
    Ok(rows)
}

pub fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_aggregate(path: &Path) -> Result<Vec<AggregateRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

/// Per-seed CSVs in `dir`, refusing to mix config hashes.
pub fn collect_run_csvs(dir: &Path) -> Result<(String, Vec<PathBuf>)> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found: Vec<(u64, String, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some((seed, hash)) = parse_csv_name(&name) {
            found.push((seed, hash, entry.path()));
        }
    }
    found.sort();
    let Some(hash) = found.first().map(|f| f.1.clone()) else {
        return Err(Error::Aggregate(format!("no run CSVs in {}", dir.display())));
    };
    if let Some(other) = found.iter().find(|f| f.1 != hash) {
        return Err(Error::Aggregate(format!(
            "refusing to mix config hashes {hash} and {}",
            other.1
        )));
    }
    Ok((hash, found.into_iter().map(|f| f.2).collect()))
}

/// Aggregate every run CSV in `in_dir` into `out`; returns the number of
/// runs combined.
pub fn aggregate_dir(
    in_dir: &Path,
    out: &Path,
    n_boot: usize,
    level: f64,
    seed: u64,
) -> Result<usize> {
    let (_, paths) = collect_run_csvs(in_dir)?;
    let runs: Vec<Vec<RunRecord>> = paths.iter().map(read_run_csv).collect::<Result<_>>()?;
    let rows = aggregate_runs(&runs, n_boot, level, seed)?;
    write_aggregate(out, &rows)?;
    Ok(runs.len())
}
