//! Experiment driver behind the `fedgat-sim` binary: dataset preparation,
//! partitioning, pre-training, training, verification and communication
//! benchmarks, written as plot-ready CSV and JSON.

pub mod config;
pub mod error;
pub mod run;
pub mod schema;
pub mod sweep;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
