//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, AbfpError>;

#[derive(Debug, Error)]
pub enum AbfpError {
    #[error("non-finite value {0} where a finite number is required")]
    NonFinite(f64),

    #[error("bit width {0} outside supported range 2..=24")]
    InvalidBits(u32),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
