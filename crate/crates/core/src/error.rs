use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated an operation's preconditions (shape, range, config).
    #[error("usage error: {0}")]
    Usage(String),

    /// Input was well-formed but carries no usable mass (all-zero rows etc.).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    /// The method cannot run on this model/report (e.g. no review layer).
    #[error("method inapplicable: {0}")]
    Inapplicable(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for usage problems, 1 for method or training failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Io { .. } | Error::Format(_) => 2,
            Error::Degenerate(_) | Error::Diverged { .. } | Error::Inapplicable(_) => 1,
        }
    }
}
