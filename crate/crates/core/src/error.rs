use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("step index {k} outside [0, {max}]")]
    StepOutOfRange { k: usize, max: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("model lacks capability `{0}` (wrap it in FiniteDifference to enable a fallback)")]
    Capability(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("lower bound undefined: log argument {0} is not positive (curvature bound m too large for this state)")]
    InvalidBound(f64),

    #[error("non-finite latent at reverse step {step} (inner iteration {inner}): {snapshot}")]
    NonFinite {
        step: usize,
        inner: usize,
        snapshot: String,
    },

    #[error("unknown hook `{0}`")]
    UnknownHook(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            actual,
        }
    }
}
