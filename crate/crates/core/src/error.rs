use thiserror::Error;

/// Errors produced by the optimizer, its models and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("ill-conditioned data: {0}")]
    IllConditioned(String),

    #[error("configuration error in `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("path cache limit exceeded: {0}")]
    CacheLimit(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Protocol(_) | Error::Integrity(_) | Error::Version { .. } => 3,
            Error::IllConditioned(_) | Error::CacheLimit(_) | Error::Oracle(_) => 4,
            Error::InvalidArgument(_) | Error::Io(_) | Error::Serde(_) => 1,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
