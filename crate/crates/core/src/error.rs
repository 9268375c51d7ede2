use std::ops::Range;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration for `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("incompatible artifact: {0}")]
    Incompatible(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("non-finite gradient for parameter {param}")]
    NonFinite { param: String },

    #[error("oracle table needs {entries} entries, limit is {limit}")]
    Capacity { entries: u128, limit: u128 },

    #[error("attribute is unreachable from this state (probability zero)")]
    AttributeUnreachable,

    #[error("check failed: {0}")]
    Assertion(String),

    #[error("remote scorer transport failure on batch {batch} (items {items:?}): {message}")]
    Transport {
        batch: usize,
        items: Range<usize>,
        message: String,
    },

    #[error("remote scorer protocol violation on batch {batch} (items {items:?}): {message}")]
    Protocol {
        batch: usize,
        items: Range<usize>,
        message: String,
    },
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::Config { .. } => 1,
            Error::Io { .. } | Error::Json { .. } | Error::Incompatible(_) => 2,
            Error::Shape { .. }
            | Error::NonFinite { .. }
            | Error::Capacity { .. }
            | Error::AttributeUnreachable
            | Error::Assertion(_) => 3,
            Error::Transport { .. } | Error::Protocol { .. } => 4,
        }
    }

    /// Transport failures may succeed on retry; everything else is permanent.
    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::Transport { .. })
    }
}
