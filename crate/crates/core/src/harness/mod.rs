//! Experiment orchestration: configuration, the streaming run, metrics and reports.

pub mod config;
pub mod metrics;
pub mod report;
pub mod run;

pub use config::RunConfig;
pub use run::{run_experiment, run_seed, write_run_dir, Dataset, Metrics, SeedOutcome};
