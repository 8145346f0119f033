use thiserror::Error;

pub type Result<T, E = LssError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LssError {
    /// A caller broke an operation's precondition (shapes, ranges, layouts).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Length { expected: u64, actual: u64 },

    #[error("pressure solve did not converge after {iterations} iterations (residual {residual:e})")]
    Solver { iterations: usize, residual: f64 },

    #[error("training failed: {0}")]
    Training(String),
}

impl LssError {
    pub fn contract(msg: impl Into<String>) -> Self {
        LssError::Contract(msg.into())
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !($cond) {
            return Err($crate::error::LssError::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
