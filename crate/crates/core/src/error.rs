use diffcore::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),

    #[error(transparent)]
    Diff(#[from] DiffError),

    #[error("{context}: parse error at byte {offset}: {reason}")]
    Parse {
        context: String,
        offset: usize,
        reason: String,
    },

    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("training aborted: {0}")]
    Aborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn parse(context: impl Into<String>, offset: usize, reason: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            offset,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
