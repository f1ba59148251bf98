use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Every weight is zero, so no proportional distribution exists.
    #[error("degenerate weights: all weights are zero")]
    DegenerateWeights,

    #[error("diverged at epoch {epoch}, step {step}: train loss {loss:e} exceeds {limit:e}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
        limit: f64,
    },

    #[error("rate undefined: {0}")]
    RateUndefined(String),

    #[error("every grid cell diverged for algorithm {0}")]
    AllDiverged(String),

    #[error("{path}: row {row}, column {column}: {message}")]
    Input {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
