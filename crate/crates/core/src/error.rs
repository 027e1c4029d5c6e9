use thiserror::Error;

/// Errors raised by the numeric core, model, data pipeline and persistence layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range for size {size}")]
    Index { index: usize, size: usize },
    #[error("task not found: {0}")]
    TaskNotFound(String),
    #[error("task already exists: {0}")]
    AlreadyExists(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("config hash mismatch: bundle {bundle}, base {base}")]
    ConfigHash { bundle: String, base: String },
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn format_err(what: &'static str, detail: impl Into<String>) -> Error {
    Error::Format {
        what,
        detail: detail.into(),
    }
}
