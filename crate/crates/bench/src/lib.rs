//! Experiment harness: configuration, seeded runs, sweeps, CSV reports and plots.

pub mod config;
pub mod error;
pub mod experiment;
pub mod plot;
pub mod report;

pub use config::ExperimentConfig;
pub use error::BenchError;
