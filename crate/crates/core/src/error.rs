use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{}: bad magic number (expected {expected:?})", path.display())]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{}: truncated buffer, expected {expected} bytes, found {actual}", path.display())]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("missing file: {}", path.display())]
    MissingFile { path: PathBuf },

    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("{what} mismatch: expected {expected}, found {actual}")]
    Mismatch {
        what: String,
        expected: String,
        actual: String,
    },

    #[error("numeric fault: {message} (first offending index {index})")]
    NumericFault { message: String, index: usize },

    #[error("degenerate field: {0}")]
    DegenerateField(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile { path }
        } else {
            Error::Io { path, source }
        }
    }

    pub fn mismatch(what: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Mismatch {
            what: what.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
