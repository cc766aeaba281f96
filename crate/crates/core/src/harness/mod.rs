//! Experiment configuration, grid runner, summaries and figures.

pub mod config;
pub mod plot;
pub mod runner;
pub mod summary;

pub use config::{RunConfig, WORKERS_ENV};
pub use runner::{run_experiment, ExperimentOutput};
pub use summary::{summarize, CellResult, MeanStd, ModeSummary, Summary};
