//! Twin-experiment harness: simulates truth and contaminated observations,
//! runs the configured filters, and aggregates Monte-Carlo sweeps into
//! CSV and JSON files.

pub mod config;
pub mod error;
pub mod experiment;
pub mod filters;
pub mod output;
pub mod runner;
pub mod verify;

pub use config::{ExperimentConfig, FilterKind, ModelKind};
pub use error::{BenchError, BenchResult};
pub use runner::{run_ensemble_size_sweep, run_single, run_sweep, SingleRun, SweepResult};
