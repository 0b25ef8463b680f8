use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A forward or backward pass produced NaN or infinity.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("adaptation diverged: {0}")]
    AdaptationDiverged(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures caused by numerics rather than by usage or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::TrainingDiverged(_) | Error::AdaptationDiverged(_)
        )
    }
}

macro_rules! invalid_arg {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(format!($($arg)*))
    };
}

pub(crate) use invalid_arg;
