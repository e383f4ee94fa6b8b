use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor extents.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A numeric or configuration parameter outside its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A caller broke an API precondition (non-scalar loss, empty stack, ...).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("training error at iteration {iteration}: {message}")]
    Training { iteration: usize, message: String },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}
