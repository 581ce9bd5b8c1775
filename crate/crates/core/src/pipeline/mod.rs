//! Configuration, persistence and orchestration of full experiments.

pub mod config;
pub mod experiment;
pub mod persist;
pub mod report;

pub use config::ExperimentConfig;
pub use experiment::{run_experiment, Runner};
pub use persist::{load_artifact, save_artifact};
pub use report::ExperimentReport;
