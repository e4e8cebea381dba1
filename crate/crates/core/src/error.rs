use std::path::{Path, PathBuf};

use accut_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("invalid parameter `{name}`: {message}")]
    Param { name: &'static str, message: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss component `{0}`")]
    NonFinite(&'static str),
    #[error("{0}")]
    Runtime(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Process exit status for the CLI: 2 config, 3 data, 4 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Param { .. } => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            _ => 4,
        }
    }
}
