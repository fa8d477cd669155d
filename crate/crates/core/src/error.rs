use std::path::PathBuf;

use thiserror::Error;
use xfer_tensor::TensorError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: malformed JSON: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: {message}")]
    Validation {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("token id {id} outside the supported range 0..{limit}")]
    TokenRange { id: u64, limit: u64 },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("unknown token id {0}")]
    UnknownToken(u32),

    #[error("decoded bytes are not valid UTF-8")]
    InvalidUtf8,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{phase} failed{}: {source}", target.as_ref().map(|t| format!(" for target {t}")).unwrap_or_default())]
    Phase {
        phase: &'static str,
        target: Option<String>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Error {
        let path = path.into();
        move |source| Error::Json { path, source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Error {
        Error::InvalidArgument(msg.into())
    }

    /// Wraps an error with the pipeline phase (and target) it occurred in.
    pub fn in_phase(self, phase: &'static str, target: Option<&str>) -> Error {
        Error::Phase {
            phase,
            target: target.map(str::to_string),
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad user input rather than a runtime fault.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Parse { .. }
            | Error::Validation { .. }
            | Error::TokenRange { .. }
            | Error::InvalidArgument(_)
            | Error::Json { .. } => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::Phase { source, .. } => source.is_user_error(),
            _ => false,
        }
    }
}
