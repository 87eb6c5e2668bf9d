use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (bad hyperparameters, unknown style,
    /// dimension mismatch between components).
    #[error("configuration error: {0}")]
    Config(String),

    /// An input could not be read or decoded.
    #[error("input error for `{reference}`: {message}")]
    Input { reference: String, message: String },

    /// Two artifacts that must agree (e.g. an adapter set and the LM it was trained
    /// against) do not.
    #[error("compatibility error: {0}")]
    Compatibility(String),

    /// Training produced a non-finite loss or similar numeric breakdown.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An external scorer returned a malformed or inconsistent payload.
    #[error("scorer protocol error: {message} (payload: {excerpt})")]
    Protocol { message: String, excerpt: String },

    #[error("external scorer unavailable: {0}")]
    Unavailable(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(reference: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Input {
            reference: reference.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn protocol(message: impl Into<String>, payload: &str) -> Self {
        let excerpt: String = payload.chars().take(160).collect();
        Error::Protocol {
            message: message.into(),
            excerpt,
        }
    }

    /// Process exit code used by the CLI: 2 for input/config problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
