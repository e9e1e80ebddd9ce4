use std::io;
use std::path::{Path, PathBuf};

/// Errors raised by file formats, packing and the verifier pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] hive_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: malformed header: {reason}")]
    Header { path: PathBuf, reason: String },
    #[error("{path}: truncated while reading {section}")]
    Truncated { path: PathBuf, section: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("packing error: {0}")]
    Packing(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("invalid input: {0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
        move |source| Error::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn json(path: &Path) -> impl FnOnce(serde_json::Error) -> Error + '_ {
        move |source| Error::Json { path: path.to_path_buf(), source }
    }

    pub(crate) fn header(path: &Path, reason: impl Into<String>) -> Error {
        Error::Header { path: path.to_path_buf(), reason: reason.into() }
    }
}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
