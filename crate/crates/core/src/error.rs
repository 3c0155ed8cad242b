use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TqError>;

#[derive(Debug, Error)]
pub enum TqError {
    /// A file is missing or does not parse.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// Data parsed but violates a cross-reference or bound.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Undecodable or non-finite input data.
    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TqError {
    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        TqError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

macro_rules! bail_arg {
    ($($t:tt)*) => {
        return Err($crate::error::TqError::Argument(format!($($t)*)))
    };
}

macro_rules! bail_integrity {
    ($($t:tt)*) => {
        return Err($crate::error::TqError::Integrity(format!($($t)*)))
    };
}

pub(crate) use bail_arg;
pub(crate) use bail_integrity;
