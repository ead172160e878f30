use std::path::PathBuf;

use crate::ClassId;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A set whose centered Gram matrix vanishes (every row constant across channels).
    #[error("degenerate set{}: {reason}", class.map(|c| format!(" for class {c}")).unwrap_or_default())]
    DegenerateSet {
        class: Option<ClassId>,
        reason: String,
    },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("bad magic bytes in tensor file")]
    BadMagic,

    #[error("unsupported tensor file version {0}")]
    BadVersion(u32),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("unknown dtype code {0}")]
    UnknownDtype(u32),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn degenerate_set(reason: impl Into<String>) -> Self {
        Error::DegenerateSet {
            class: None,
            reason: reason.into(),
        }
    }

    /// Attach a class id to a [`Error::DegenerateSet`]; other variants pass through.
    pub(crate) fn for_class(self, id: ClassId) -> Self {
        match self {
            Error::DegenerateSet { reason, .. } => Error::DegenerateSet {
                class: Some(id),
                reason,
            },
            other => other,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
