use thiserror::Error;

/// Errors raised by the numerical pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("resource limit exceeded: {0}")]
    ResourceLimit(String),

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("no convergence after {iterations} iterations (best residual {best_residual:.3e})")]
    Convergence { iterations: usize, best_residual: f64 },

    #[error("fixed-point iteration diverged at iteration {iteration} (residual {residual:.3e})")]
    Diverged {
        iteration: usize,
        residual: f64,
        trace: Vec<f64>,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("no exceptional point found: {0}")]
    NoEpFound(String),

    #[error("fit failed: {0}")]
    FitFailure(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
