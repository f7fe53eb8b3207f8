use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("schema violation in field `{field}`: {reason}")]
    SchemaViolation { field: String, reason: String },
    #[error("inconsistent label for video `{video}`: y={y}, category={category}")]
    InconsistentLabel { video: String, y: u8, category: usize },
    #[error("bad magic in {}: expected {expected:?}", path.display())]
    BadMagic { path: PathBuf, expected: &'static str },
    #[error("dimension mismatch in {}: {reason}", path.display())]
    DimensionMismatch { path: PathBuf, reason: String },
    #[error("non-finite entry at index {index} in {}", path.display())]
    NonFiniteEntry { path: PathBuf, index: usize },
    #[error("i/o failure on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite result produced by {0}")]
    NonFiniteResult(&'static str),
    #[error("backward requires a 1x1 loss, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("k={k} out of range for {n} frames")]
    KOutOfRange { k: usize, n: usize },
    #[error("M={m} out of range for {n} frames")]
    MOutOfRange { m: usize, n: usize },
    #[error("zero-norm vector in {0}")]
    ZeroVector(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty class name at index {0}")]
    EmptyClassName(usize),
    #[error("beta must be positive, got {0}")]
    BetaOutOfRange(f64),
    #[error("labels contain a single class only")]
    SingleClassOnly,
    #[error("labels contain no positives")]
    NoPositives,
    #[error("non-finite loss term `{term}` at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        term: &'static str,
        epoch: usize,
        step: usize,
    },
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// Process exit status: 2 usage/config, 3 I/O, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingFile(_)
            | Error::Io { .. }
            | Error::BadMagic { .. }
            | Error::DimensionMismatch { .. }
            | Error::NonFiniteEntry { .. } => 3,
            Error::NonFiniteResult(_) | Error::NonFiniteLoss { .. } | Error::ZeroVector(_) => 4,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn schema(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::SchemaViolation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
