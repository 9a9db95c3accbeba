use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("transition chain broken at index {index}")]
    ChainBreak { index: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short, stable identifier used as the CLI error prefix.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } | Error::Shape(_) => "dimension",
            Error::TapeConsumed => "internal",
            Error::NonFinite(_) => "numeric",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::ChainBreak { .. } | Error::InsufficientData(_) => "data",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn dim(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            actual,
        }
    }
}
