use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: missing field \"{field}\"")]
    MissingField { line: usize, field: &'static str },
    #[error("format error: {0}")]
    Format(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("internal consistency error: {0}")]
    Consistency(String),
    #[error(transparent)]
    Autograd(cde_autograd::AutogradError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<cde_autograd::AutogradError> for Error {
    fn from(e: cde_autograd::AutogradError) -> Self {
        match e {
            cde_autograd::AutogradError::NonFinite(what) => Error::Numerical(format!("{what} is not finite")),
            e => Error::Autograd(e),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
