use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DuqError>;

#[derive(Debug, Error)]
pub enum DuqError {
    /// A network or model was assembled with inconsistent shapes.
    #[error("configuration error at layer {layer}: {message}")]
    Config { layer: usize, message: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A cache or gradient buffer does not belong to the net it was handed to.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("inference error: {0}")]
    Inference(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DuqError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DuqError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        DuqError::NonFinite {
            context: context.into(),
        }
    }

    /// Usage and configuration problems are reported differently from
    /// numeric or I/O failures by the command-line front end.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            DuqError::Usage(_) | DuqError::InvalidConfig(_) | DuqError::Config { .. }
        )
    }
}
