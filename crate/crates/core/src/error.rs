use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("mask has no foreground pixels")]
    EmptyMask,

    #[error("invalid run-length encoding: {0}")]
    InvalidRle(String),

    #[error("invalid rank orders: {0}")]
    InvalidRanks(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("image `{image_id}`, field `{field}`: {reason}")]
    Validation {
        image_id: String,
        field: String,
        reason: String,
    },

    #[error("no defined per-image scores to aggregate ({skipped} undefined)")]
    NothingToAggregate { skipped: usize },

    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dims_mismatch(expected: (usize, usize), actual: (usize, usize)) -> Error {
    Error::DimensionMismatch {
        expected: format!("{}x{}", expected.0, expected.1),
        actual: format!("{}x{}", actual.0, actual.1),
    }
}
