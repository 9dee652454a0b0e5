//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the certification harness.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument was outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Inputs had incompatible shapes or lengths.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A dataset file failed validation; `line` is 1-based.
    #[error("{message} (line {line})")]
    DataLoad { line: usize, message: String },

    /// A model adapter invocation failed.
    #[error("adapter error: {message}")]
    Adapter { message: String },

    /// A design matrix was (numerically) rank deficient.
    #[error("singular design: {0}")]
    SingularDesign(String),

    /// An iterative routine did not converge.
    #[error("{what} did not converge after {iterations} iterations")]
    NonConvergence { what: String, iterations: usize },

    /// Training diverged (loss became non-finite).
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn adapter(msg: impl Into<String>) -> Self {
        Error::Adapter {
            message: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
