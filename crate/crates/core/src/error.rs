use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the sampling toolkit and experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the operation's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    /// A sampler or inversion step produced NaN or infinite values.
    #[error("non-finite values after step at t = {t}")]
    NonFinite { t: usize },

    #[error("predictor requires a conditioning image but none was supplied")]
    MissingCondition,

    #[error("training diverged at iteration {iteration}: loss {loss} exceeds 10x initial loss {initial}")]
    Divergence {
        iteration: usize,
        loss: f64,
        initial: f64,
    },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Failures decoding on-disk artifacts.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected ASTIMG01")]
    BadMagic,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("image dimensions {width}x{height} overflow the addressable size")]
    DimensionOverflow { width: u32, height: u32 },
    #[error("{found} trailing bytes after payload")]
    TrailingBytes { found: usize },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether this error stems from user configuration rather than a runtime failure.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Domain(_))
    }
}
