use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pruning library and the training harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("teacher did not converge: eval accuracy {accuracy:.4} below required {required:.4}")]
    NotConverged { accuracy: f64, required: f64 },

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Stable machine-readable kind, used in CLI error reports and FFI status codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Input(_) => "input",
            Error::Usage(_) => "usage",
            Error::Config { .. } => "config",
            Error::Format(_) => "format",
            Error::NonFinite(_) => "non_finite",
            Error::NotConverged { .. } => "not_converged",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
