use std::path::PathBuf;

use smds_core::SmdsError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Model(#[from] SmdsError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl HarnessError {
    pub fn config(msg: impl Into<String>) -> Self {
        HarnessError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        HarnessError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// 2 config error, 3 numeric failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Model(SmdsError::Config(_)) => 2,
            HarnessError::Model(SmdsError::Dimension { .. }) => 2,
            HarnessError::Model(SmdsError::Document(_)) => 4,
            HarnessError::Model(_) => 3,
            HarnessError::Io { .. } | HarnessError::Format { .. } => 4,
        }
    }
}

impl From<Box<smds_core::learning::EmFailure>> for HarnessError {
    fn from(f: Box<smds_core::learning::EmFailure>) -> Self {
        HarnessError::Model(f.error)
    }
}
