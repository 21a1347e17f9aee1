use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("format: {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("data: {0}")]
    Data(String),

    #[error("unsupported camera model {model_id} (camera {camera_id}); only SIMPLE_PINHOLE and PINHOLE are accepted")]
    UnsupportedCamera { camera_id: u32, model_id: i32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric: {0}")]
    Numeric(String),

    #[error("missing asset {name}: {hint}")]
    Asset { name: String, hint: String },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used for process exit codes and the C ABI status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            ErrorClass::Config => "E_CONFIG",
            ErrorClass::Data => "E_DATA",
            ErrorClass::Numeric => "E_NUMERIC",
        }
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Asset { .. } => ErrorClass::Config,
            Error::Numeric(_) => ErrorClass::Numeric,
            Error::Format { .. }
            | Error::Data(_)
            | Error::UnsupportedCamera { .. }
            | Error::Shape(_)
            | Error::Checkpoint { .. }
            | Error::Io { .. } => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
