use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = NaplError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NaplError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: parse error at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] napl_core::Error),
}

impl NaplError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NaplError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        NaplError::Json {
            path: path.into(),
            source,
        }
    }
}
