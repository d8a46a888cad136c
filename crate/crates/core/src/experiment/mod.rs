//! Configuration-driven experiments over methods, seeds and heterogeneity
//! levels.

pub mod config;
pub mod metrics;
pub mod results;
pub mod runner;

pub use config::ExperimentConfig;
pub use results::{RunResult, SummaryRow};
pub use runner::{run_experiment, ExperimentReport};
