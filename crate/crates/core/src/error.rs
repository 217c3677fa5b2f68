use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("non-finite state at sampler step {step}")]
    NonFiniteState { step: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("training diverged at step {step}: non-finite {what}")]
    Diverged {
        step: usize,
        what: &'static str,
        /// Parameters from before the failing update.
        last_good: Box<crate::checkpoint::Checkpoint>,
    },
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
