use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the model, data and evaluation layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("filtering removed every {0}")]
    EmptyResult(&'static str),

    #[error("row {0} sums to zero")]
    ZeroRow(usize),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("pipeline mismatch: likelihood {likelihood} cannot consume {data} data")]
    PipelineMismatch { likelihood: String, data: String },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("matrix not positive definite after jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },

    #[error("non-finite loss at step {step}: elbo={elbo} ell={ell} klx={klx} klu={klu}")]
    NonFiniteLoss {
        step: usize,
        elbo: f64,
        ell: f64,
        klx: f64,
        klu: f64,
    },

    #[error("unknown preset {0:?}")]
    UnknownPreset(String),

    #[error("labels have lengths {0} and {1}")]
    LengthMismatch(usize, usize),

    #[error("silhouette needs at least two classes, found {0}")]
    SingleClass(usize),

    #[error("invalid config field `{field}`: {msg}")]
    InvalidConfig { field: String, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            msg: msg.into(),
        }
    }
}
