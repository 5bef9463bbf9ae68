//! Error type shared across the crate.

use std::path::PathBuf;

/// Crate-wide error. Variants map onto the CLI exit-code contract:
/// configuration problems, data problems, and numeric divergence are
/// kept distinct so callers can react differently to each.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    /// Invalid configuration or arguments (bad shapes, ranges, flags).
    #[error("config error: {0}")]
    Config(String),

    /// Missing or malformed data on disk (datasets, checkpoints, images).
    #[error("data error: {0}")]
    Data(String),

    /// Numeric divergence at runtime (NaN/inf loss, degenerate solve).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CoreError::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        CoreError::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}
