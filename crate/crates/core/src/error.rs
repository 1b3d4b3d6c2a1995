use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for an operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A spec, config file or argument combination is invalid.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A value left the numeric domain (NaN/Inf, unstabilized zero denominator, ...).
    #[error("numeric failure in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// Recorded state (pool indices, checkpoints, dataset files) is internally inconsistent.
    #[error("corrupt data: {0}")]
    Corrupt(String),

    /// A graph was asked to backpropagate twice.
    #[error("graph already consumed by backward")]
    GraphConsumed,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric { op, detail: detail.into() }
    }
}
