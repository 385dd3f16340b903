use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApvitError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("load error in {path}: {msg}")]
    Load { path: PathBuf, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("gradient check aborted: {0}")]
    TieDetected(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ApvitError> = std::result::Result<T, E>;

impl ApvitError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ApvitError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        ApvitError::Load {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
