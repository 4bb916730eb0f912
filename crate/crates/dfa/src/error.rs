use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },

    /// Config problem, located as precisely as the source allows.
    #[error("{location}: {message}")]
    Config { location: String, message: String },

    #[error("missing required key `{key}` in {location}")]
    MissingKey { key: String, location: String },

    #[error("{path}:{line}: {message}")]
    Format { path: PathBuf, line: usize, message: String },

    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },

    #[error("{0}")]
    Core(#[from] dfa_core::Error),

    #[error("{0}")]
    Usage(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for a training abort caused by a NaN or infinite loss.
    pub fn is_non_finite(&self) -> bool {
        matches!(self, Error::Core(dfa_core::Error::NonFinite { .. }))
    }
}
