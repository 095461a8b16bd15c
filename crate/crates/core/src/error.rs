use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("optimizer state: {0}")]
    State(String),

    #[error("gradient check harness: {0}")]
    Harness(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: line {row}, column `{column}`: {reason}")]
    Cell {
        path: PathBuf,
        /// One-based line in the file; the header is line 1.
        row: usize,
        column: String,
        reason: String,
    },

    #[error(
        "insufficient data in {segment} segment: {available} points, need at least {required}"
    )]
    InsufficientData {
        segment: String,
        available: usize,
        required: usize,
    },

    #[error("capacity exceeded: {what} is {got}, maximum {max}")]
    Capacity {
        what: &'static str,
        got: usize,
        max: usize,
    },

    #[error("weight file: {0}")]
    WeightFile(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Broad class used by front ends to pick an exit status.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Dimension { .. } | Error::Capacity { .. } => ErrorKind::Usage,
            Error::Numerical(_) | Error::Harness(_) | Error::State(_) => ErrorKind::Numerical,
            Error::Data(_)
            | Error::Cell { .. }
            | Error::InsufficientData { .. }
            | Error::WeightFile(_)
            | Error::Io { .. } => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}
