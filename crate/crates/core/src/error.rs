use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BsrnError {
    /// Operand shapes are incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// The model or training configuration is invalid or does not support the request.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed image or checkpoint bytes.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("sampling error for {}: {message}", path.display())]
    Sampling { path: PathBuf, message: String },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("i/o error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl BsrnError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        BsrnError::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        BsrnError::Config(msg.into())
    }

    pub(crate) fn parse(offset: usize, msg: impl Into<String>) -> Self {
        BsrnError::Parse {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BsrnError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = BsrnError> = std::result::Result<T, E>;
