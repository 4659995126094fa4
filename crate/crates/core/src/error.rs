use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    InFile { path: PathBuf, source: Box<Error> },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("death ≤ birth at line {line}")]
    NonPositiveLifetime { line: usize },

    #[error("non-finite value at line {line}")]
    NonFinite { line: usize },

    #[error("invalid persistence point ({birth}, {death}): {reason}")]
    InvalidPoint {
        birth: f64,
        death: f64,
        reason: &'static str,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("point ({x}, {y}) lies outside the root cell")]
    OutsideRoot { x: f64, y: f64 },

    #[error("level {level} outside [{lo}, {hi}]")]
    LevelOutOfRange { level: u32, lo: u32, hi: u32 },

    #[error("embedding vectors come from different trees ({left} vs {right})")]
    SignatureMismatch { left: String, right: String },

    #[error("assignment size {size} exceeds the oracle cap {cap}")]
    SizeCap { size: usize, cap: usize },

    #[error("brute force enumeration supports at most {bound} expanded points, got {size}")]
    BruteForceBound { size: usize, bound: usize },

    #[error("serialization: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// The underlying error with any file context removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::InFile { source, .. } => source.root(),
            e => e,
        }
    }

    /// Malformed input text, as opposed to I/O or configuration problems.
    pub fn is_parse(&self) -> bool {
        matches!(
            self.root(),
            Error::Parse { .. }
                | Error::NonPositiveLifetime { .. }
                | Error::NonFinite { .. }
                | Error::InvalidPoint { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
