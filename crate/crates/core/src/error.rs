use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures raised while reading or writing a checkpoint file.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic number {found:?}, expected \"DCAM\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u8),
    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("duplicate parameter name {0:?}")]
    DuplicateName(String),
    #[error("missing parameter {0:?}")]
    MissingParameter(String),
    #[error("unexpected parameter {0:?}")]
    UnexpectedParameter(String),
    #[error("parameter {name:?} has dims {found:?}, model expects {expected:?}")]
    DimsMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("invalid UTF-8 in {what}")]
    InvalidUtf8 { what: &'static str },
    #[error("trailing bytes after last parameter")]
    TrailingBytes,
}

/// What went wrong on one line of a CSV or netpbm input.
#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum ParseErrorKind {
    #[error("missing header column {0:?}")]
    MissingColumn(String),
    #[error("unknown pathology {0:?}")]
    UnknownLabel(String),
    #[error("duplicate image id {0:?}")]
    DuplicateImage(String),
    #[error("{0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("state error: {0}")]
    State(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("degenerate class distribution: {positives} positive and {negatives} negative labels")]
    DegenerateClass { positives: usize, negatives: usize },
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("{path}:{line}: {kind}")]
    Parse {
        path: String,
        line: u64,
        kind: ParseErrorKind,
    },
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: String,
        #[source]
        source: CheckpointError,
    },
    #[error("image {path}: {message}")]
    Image { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl std::fmt::Display, line: u64, kind: ParseErrorKind) -> Self {
        Error::Parse {
            path: path.to_string(),
            line,
            kind,
        }
    }

    pub(crate) fn malformed(
        path: impl std::fmt::Display,
        line: u64,
        message: impl Into<String>,
    ) -> Self {
        Error::parse(path, line, ParseErrorKind::Malformed(message.into()))
    }

    /// True for errors caused by bad input or configuration rather than by
    /// the environment (IO). The CLI maps these to exit code 2.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Numeric(_) | Error::State(_))
    }
}
