//! Experiment orchestration, metrics and reports.

pub mod config;
pub mod experiment;
pub mod metrics;
pub mod report;

pub use config::ExperimentConfig;
pub use experiment::{run_experiment, MetricsBundle};
