use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("parse error in {path} at row {row}: {reason}")]
    Parse { path: PathBuf, row: usize, reason: String },

    #[error("integrity violation: {0}")]
    Integrity(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite {what} at epoch {epoch}, step {step} (lr {lr})")]
    NonFinite {
        what: String,
        epoch: usize,
        step: usize,
        lr: f64,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    /// Process exit code for this error class: 2 usage/config, 3 data
    /// integrity, 4 numerical failure, 5 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Load { .. } | Error::Parse { .. } | Error::Integrity(_) => 3,
            Error::NonFinite { .. } => 4,
            Error::Io { .. } => 5,
        }
    }
}
