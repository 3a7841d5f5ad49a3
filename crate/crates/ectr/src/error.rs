//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or batch dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A caller-supplied value is outside its contract.
    #[error("invalid input: {0}")]
    Input(String),

    /// A configuration file or `TrainConfig` is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A non-finite value appeared where finite math is required.
    /// `player` identifies which minimax player produced it when known.
    #[error("numeric error ({player}): {message}")]
    Numeric { player: String, message: String },

    /// Delimited-text parsing failure with its location.
    #[error("parse error at {path}:{row}:{col}: {message}")]
    Parse {
        path: String,
        row: usize,
        col: usize,
        message: String,
    },

    /// Column roles do not describe the file.
    #[error("schema error: {0}")]
    Schema(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(player: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Numeric {
            player: player.into(),
            message: msg.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
