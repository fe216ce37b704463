use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("invalid config identifier {0:?}")]
    ConfigIdentifier(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no eligible target speaker for strategy {0}")]
    NoEligibleTarget(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
