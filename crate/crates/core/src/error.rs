use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the laboratory's numeric and data pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {what} (residual {residual:e})")]
    Numerical { what: String, residual: f64 },

    #[error("singular resolvent at dt={dt:e} (pivot magnitude {pivot:e})")]
    SingularResolvent { dt: f64, pivot: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("training diverged at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("capacity exhausted: {0}")]
    Capacity(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
