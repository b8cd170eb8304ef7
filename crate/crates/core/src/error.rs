use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt dump: {0}")]
    CorruptDump(String),

    #[error("degenerate row {row}: zero vector after centering")]
    DegenerateRow { row: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
