//! Per-iteration records, moving averages and the per-seed CSV format.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{LearnerState, StepOutcome, Utility};

pub const CSV_HEADER: &str =
    "iter,seed,inst_sumrate,ma_sumrate,power_used,power_violation,max_rate_residual,lambda_power,objective,wall_ns";

/// Column names of the numeric metrics, in CSV order.
pub const METRICS: [&str; 8] = [
    "inst_sumrate",
    "ma_sumrate",
    "power_used",
    "power_violation",
    "max_rate_residual",
    "lambda_power",
    "objective",
    "wall_ns",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub iter: u64,
    pub seed: u64,
    /// Weighted sum-rate at the unperturbed action this iteration.
    pub inst_sumrate: f64,
    pub ma_sumrate: f64,
    pub power_used: f64,
    /// `max(0, ma_power - p_max)`
    pub power_violation: f64,
    /// `max_i (x_i - ma_rate_i)`; positive when `x` outruns the delivered rates.
    pub max_rate_residual: f64,
    pub lambda_power: f64,
    /// `w'x`
    pub objective: f64,
    pub wall_ns: u64,
}

impl RunRecord {
    pub fn metric(&self, name: &str) -> Option<f64> {
        Some(match name {
            "inst_sumrate" => self.inst_sumrate,
            "ma_sumrate" => self.ma_sumrate,
            "power_used" => self.power_used,
            "power_violation" => self.power_violation,
            "max_rate_residual" => self.max_rate_residual,
            "lambda_power" => self.lambda_power,
            "objective" => self.objective,
            "wall_ns" => self.wall_ns as f64,
            _ => return None,
        })
    }

    pub fn is_finite(&self) -> bool {
        METRICS.iter().all(|m| self.metric(m).is_some_and(f64::is_finite))
    }
}

/// Mean over the trailing `window` values (fewer during warm-up).
#[derive(Debug, Clone)]
pub struct MovingAverage {
    buf: Vec<f64>,
    next: usize,
    filled: usize,
    sum: f64,
}

impl MovingAverage {
    pub fn new(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::invalid("ma_window", "must be >= 1"));
        }
        Ok(MovingAverage {
            buf: vec![0.0; window],
            next: 0,
            filled: 0,
            sum: 0.0,
        })
    }

    pub fn push(&mut self, v: f64) -> f64 {
        self.sum += v - self.buf[self.next];
        self.buf[self.next] = v;
        self.next = (self.next + 1) % self.buf.len();
        self.filled = (self.filled + 1).min(self.buf.len());
        if self.next == 0 {
            // Resum once per lap so rounding in the running sum cannot drift.
            self.sum = self.buf.iter().sum();
        }
        self.mean()
    }

    pub fn mean(&self) -> f64 {
        if self.filled == 0 {
            0.0
        } else {
            self.sum / self.filled as f64
        }
    }
}

/// Turns step outcomes into [`RunRecord`]s.
#[derive(Debug, Clone)]
pub struct MetricsTracker {
    sumrate: MovingAverage,
    power: MovingAverage,
    rates: Vec<MovingAverage>,
    p_max: f64,
}

impl MetricsTracker {
    pub fn new(window: usize, n_users: usize, p_max: f64) -> Result<Self> {
        Ok(MetricsTracker {
            sumrate: MovingAverage::new(window)?,
            power: MovingAverage::new(window)?,
            rates: (0..n_users)
                .map(|_| MovingAverage::new(window))
                .collect::<Result<_>>()?,
            p_max,
        })
    }

    pub fn record(
        &mut self,
        seed: u64,
        state: &LearnerState,
        utility: &Utility,
        outcome: &StepOutcome,
        wall_ns: u64,
    ) -> RunRecord {
        let m = &outcome.metrics;
        let ma_sumrate = self.sumrate.push(m.weighted_sumrate);
        let ma_power = self.power.push(m.power_used);
        let max_rate_residual = self
            .rates
            .iter_mut()
            .zip(&m.rates)
            .zip(&state.x)
            .map(|((ma, r), x)| x - ma.push(*r))
            .fold(f64::NEG_INFINITY, f64::max);
        RunRecord {
            iter: state.iter,
            seed,
            inst_sumrate: m.weighted_sumrate,
            ma_sumrate,
            power_used: m.power_used,
            power_violation: (ma_power - self.p_max).max(0.0),
            max_rate_residual,
            lambda_power: state.lambda_r.last().copied().unwrap_or(0.0),
            objective: utility.objective(&state.x),
            wall_ns,
        }
    }
}

/// Streams records to a per-seed CSV file.
pub struct CsvSink {
    writer: csv::Writer<BufWriter<File>>,
}

impl CsvSink {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(BufWriter::new(file));
        // Header up front so a run that dies before its first row still
        // leaves a readable file.
        writer.write_record(CSV_HEADER.split(','))?;
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(CsvSink { writer })
    }

    pub fn write(&mut self, r: &RunRecord) -> Result<()> {
        self.writer.serialize(r)?;
        Ok(())
    }

    /// Flush buffered rows through to the file.
    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io("<csv>", e))
    }
}

pub fn read_run_csv(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Aggregate(format!(
            "{}: unexpected header `{}`",
            path.display(),
            header.join(",")
        )));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}
