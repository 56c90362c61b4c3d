use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("diffusion step {t} outside 1..={max}")]
    StepOutOfRange { t: usize, max: usize },
    #[error("invalid noise range: {0}")]
    InvalidRange(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no training pairs")]
    DataEmpty,
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub(crate) fn shape_err(expected: impl std::fmt::Display, got: impl std::fmt::Debug) -> ModelError {
    ModelError::ShapeMismatch {
        expected: expected.to_string(),
        got: format!("{got:?}"),
    }
}
