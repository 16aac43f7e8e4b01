use thiserror::Error;

/// Errors surfaced by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// A zero-norm or otherwise degenerate input where a direction is required.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    /// NaN or infinity reached a construction boundary.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// True for errors caused by user-supplied configuration.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Parse(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
