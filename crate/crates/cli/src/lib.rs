//! Experiment orchestration for the queueing-bandit simulator: configuration
//! files, multi-seed runs, CSV and SVG output, and offline head training.

pub mod config;
pub mod experiment;
pub mod plot;
pub mod train;

pub use config::{EnvironmentKind, ExperimentConfig};
pub use experiment::{
    compare_policies, execute, run_experiment, ExperimentResults, PolicyResult, RunManifest,
};
pub use plot::{emit_plot, parse_series, render_svg};
pub use train::{train_head_from_config, HeadTraining};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or arguments; exit code 2.
    #[error("configuration error: {0}")]
    Config(String),
    /// Anything that fails after the configuration was accepted; exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<cqb_core::Error> for CliError {
    fn from(e: cqb_core::Error) -> Self {
        match e {
            cqb_core::Error::Config(msg) => CliError::Config(msg),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
