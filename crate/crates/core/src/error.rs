use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{context}: line {line}: {message}")]
    Parse {
        context: String,
        line: usize,
        message: String,
    },
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("empty matrix")]
    EmptyMatrix,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("non-finite value at row {row}, col {col}")]
    NonFinite { row: usize, col: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("averaged-gallery mode requires a super-gallery")]
    MissingSuperGallery,
    #[error("tracklet {0} has no members with a feature index")]
    NoFeatureMembers(usize),
    #[error("histogram is empty")]
    EmptyHistogram,
    #[error("histogram has a single nonzero bin; cannot locate a left half")]
    DegenerateHistogram,
    #[error("score {score} for pair ({i}, {j}) outside [0, {max}]")]
    ScoreOutOfRange {
        i: usize,
        j: usize,
        score: f64,
        max: f64,
    },
    #[error("frames out of order: frame {found} after frame {previous}")]
    OutOfOrderFrames { previous: u64, found: u64 },
    #[error("missing required field: {0}")]
    MissingField(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),
}

/// Coarse failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Validation,
    Runtime,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } => ErrorClass::Runtime,
            Error::InvalidParameter(_) => ErrorClass::Usage,
            _ => ErrorClass::Validation,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
