use thiserror::Error;

/// Errors raised by the simulator core.
#[derive(Debug, Error)]
pub enum Error {
    /// An input lies outside the domain of a mathematical operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Vectors or matrices whose shapes do not agree.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A configuration value that can never produce a valid run.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Instance generation could not satisfy the slackness constraint.
    #[error("instance generation failed: {0}")]
    Generation(String),

    /// A decision referenced a job that is not in the queue.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A matrix expected to be positive definite was not.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Contrastive training diverged.
    #[error("training error: {0}")]
    Training(String),

    /// Per-run series could not be aggregated.
    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
