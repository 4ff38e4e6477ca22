use std::path::PathBuf;

use thiserror::Error;

use crate::losses::LossBreakdown;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}:{line}: rotation determinant {det} is not 1")]
    BadRotation { path: PathBuf, line: usize, det: f64 },

    #[error("IMU data has no samples for frame interval {0}")]
    MissingInterval(usize),

    #[error("unsupported channel count {0} (expected 1 or 3)")]
    UnsupportedChannels(usize),

    #[error("trajectory has no subsequence of at least 100 m")]
    TooShort,

    #[error("non-finite activation in {0}")]
    NonFiniteActivation(String),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {step}: {breakdown:?}")]
    NonFiniteLoss {
        step: usize,
        breakdown: Box<LossBreakdown>,
    },

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("incompatible checkpoint: {0}")]
    Version(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
