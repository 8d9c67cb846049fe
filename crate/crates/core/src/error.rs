use thiserror::Error;

#[derive(Debug, Error)]
pub enum DefError {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("backward called without a preceding forward pass")]
    BackwardWithoutForward,

    #[error("timestep {t} outside [1, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("rollout diverged at step {step}")]
    Diverged { step: usize },

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DefError>;

pub(crate) fn shape_err(expected: impl ToString, actual: impl ToString) -> DefError {
    DefError::ShapeMismatch {
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
