//! Experiment orchestration: configuration, multi-seed runs, CSV output,
//! bootstrap aggregation, timing and the self-verification suite.

pub mod aggregate;
pub mod config;
pub mod experiment;
pub mod record;
pub mod timing;
pub mod verify;

pub use aggregate::{aggregate_dir, aggregate_runs, AggregateRow};
pub use config::ExperimentConfig;
pub use experiment::{run_experiment, ExperimentReport, RunStatus};
pub use record::RunRecord;
