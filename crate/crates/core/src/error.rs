//! Error types shared across the crate.

use std::path::PathBuf;

/// Crate-wide error type. The CLI maps these onto process exit codes
/// (validation → 2, divergence → 3, i/o → 4).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error in {path} (line {line}): {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("singular mass matrix: vertex {vertex} has zero weight but nonzero signal momentum")]
    SingularMass { vertex: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn divergence(msg: impl Into<String>) -> Self {
        Error::Divergence(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
