//! Crate-wide error type with the exit-code contract used by the CLI.

use std::path::{Path, PathBuf};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A file that exists but does not parse; carries file and line.
    #[error("{file}:{line}: {message}")]
    Malformed {
        file: PathBuf,
        line: usize,
        message: String,
    },
    /// Inputs that violate a documented precondition or invariant.
    #[error("validation error: {0}")]
    Validation(String),
    /// Numeric failures: singular systems, degenerate inputs, non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn malformed(file: impl AsRef<Path>, line: usize, message: impl Into<String>) -> Self {
        Error::Malformed {
            file: file.as_ref().to_path_buf(),
            line,
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Error::Validation(message.into())
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Error::Numeric(message.into())
    }

    /// CLI contract: 0 success, 2 validation error, 3 runtime/numeric error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Malformed { .. } | Error::Validation(_) => 2,
            Error::Io { .. } | Error::Numeric(_) => 3,
        }
    }
}
