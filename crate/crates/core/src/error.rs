use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VosError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl VosError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        VosError::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        VosError::Argument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        VosError::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        VosError::Data(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VosError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        VosError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for the command-line front end:
    /// 2 usage, 3 data, 4 config.
    pub fn exit_code(&self) -> i32 {
        match self {
            VosError::Argument(_) => 2,
            VosError::Config(_) => 4,
            VosError::Dimension(_) | VosError::Data(_) | VosError::Format { .. } | VosError::Io { .. } => 3,
        }
    }
}

pub type Result<T, E = VosError> = std::result::Result<T, E>;
