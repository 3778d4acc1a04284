use thiserror::Error;

use crate::net::EpochRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the mathematical domain of a function.
    #[error("{func}: argument outside domain ({detail})")]
    Domain { func: &'static str, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Validation loss became non-finite. The history up to that point is kept
    /// so callers can report where it went wrong.
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        history: Vec<EpochRecord>,
    },

    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(func: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            func,
            detail: detail.into(),
        }
    }
}
