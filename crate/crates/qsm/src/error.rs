use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, QsmError>;

#[derive(Debug, Error)]
pub enum QsmError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimMismatch {
        expected: [usize; 3],
        found: [usize; 3],
    },

    #[error("problem too large to densify: {unknowns} unknowns exceeds limit {limit}")]
    SizeGuard { unknowns: usize, limit: usize },

    #[error("solver diverged at iteration {iter}: estimate norm grew {growth:.3e}-fold")]
    Diverged { iter: usize, growth: f64 },
}

impl QsmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        QsmError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        QsmError::Json {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        QsmError::Invalid(msg.into())
    }
}
