use std::path::PathBuf;

use thiserror::Error;

/// Errors produced while loading exports, solving transport problems and
/// scoring task pairs.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed or unsupported file contents.
    #[error("format error: {0}")]
    Format(String),

    /// Input violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Non-finite or otherwise unusable numeric input.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("numeric overflow in kernel-domain Sinkhorn ({0}); retry with log_domain = true")]
    Overflow(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("evaluation failed: {0}")]
    Run(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// True for failures caused by the file system or unreadable file contents,
    /// as opposed to bad parameters or inconsistent data.
    pub fn is_io_like(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Format(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
