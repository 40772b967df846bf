use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or hyperparameters that can never work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller passed a value outside the operation's domain.
    #[error("invalid input: {0}")]
    Input(String),

    /// The checkpoint or data file is not in the expected format.
    #[error("format error: {0}")]
    Format(String),

    /// The file parsed but its contents are inconsistent.
    #[error("validation error in tensor `{tensor}`: {reason}")]
    Validation { tensor: String, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn validation(tensor: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            tensor: tensor.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
