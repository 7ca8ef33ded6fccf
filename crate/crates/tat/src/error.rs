use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::idx::IdxError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] tat_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Checkpoint {
        path: PathBuf,
        source: CheckpointError,
    },
    #[error("{path}: {source}")]
    Idx { path: PathBuf, source: IdxError },
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure stems from invalid input (configuration, arguments)
    /// rather than from running the job.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Usage(_) => true,
            Error::Core(e) => matches!(
                e,
                tat_core::Error::Config { .. } | tat_core::Error::InvalidArgument(_)
            ),
            _ => false,
        }
    }
}

pub(crate) fn config_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Core(tat_core::Error::config(key, reason))
}
