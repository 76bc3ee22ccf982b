use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor dimension does not match what an operation expects.
    #[error("dimension error on {axis}: {message}")]
    Dimension { axis: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("state error: {0}")]
    State(String),

    #[error("batch too small for batch normalization in train mode: {0} values per channel")]
    BatchSize(usize),

    #[error("recording too short: {got} samples, need at least {need}")]
    TooShort { got: usize, need: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("non-finite gradient in parameter `{param}` ({count} entries)")]
    NonFiniteGradient { param: String, count: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(axis: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Dimension {
            axis: axis.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed or missing input data rather than
    /// by a programming or configuration mistake.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Data(_) | Error::Io { .. } | Error::Csv(_) | Error::Json(_) | Error::TooShort { .. }
        )
    }
}
