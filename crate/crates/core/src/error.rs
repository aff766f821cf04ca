use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: String, detail: String },

    #[error("non-finite values in {stage} at index {index}")]
    NonFinite { stage: &'static str, index: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("matching error: {0}")]
    Matching(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("{file}: record {record}: {message}")]
    Malformed {
        file: PathBuf,
        record: usize,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors the operator can fix by changing inputs (exit code 1) versus
    /// failures during execution (exit code 2).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Shape { .. }
                | Error::UnknownParam(_)
                | Error::Malformed { .. }
                | Error::Checkpoint(_)
                | Error::Io { .. }
        )
    }
}
