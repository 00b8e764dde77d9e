use std::path::PathBuf;

/// Errors surfaced by every layer of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("state error: {0}")]
    State(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("data integrity error in {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("training diverged at iteration {iter}: {reason}")]
    Divergence { iter: usize, reason: String },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn integrity(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Integrity {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
