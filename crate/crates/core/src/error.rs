use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the pricing library.
#[derive(Debug, Error)]
pub enum QlbsError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("rank-deficient normal equations (pivot {pivot} at column {column})")]
    RankDeficient { column: usize, pivot: f64 },

    #[error("malformed path table: {0}")]
    MalformedTable(String),

    #[error("malformed dataset: {0}")]
    MalformedDataset(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("JSON error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, QlbsError>;

impl QlbsError {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        QlbsError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        QlbsError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        QlbsError::Csv {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        QlbsError::Json {
            path: path.into(),
            source,
        }
    }
}
