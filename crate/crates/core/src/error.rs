use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the CLI to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: missing file")]
    MissingFile { path: PathBuf },

    #[error("{file}:{line}: malformed record: {msg}")]
    Malformed {
        file: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{file}: dimension mismatch: {msg}")]
    DimensionMismatch { file: PathBuf, msg: String },

    #[error("{file}: sample `{sample_id}` references row {row}, but only {rows} rows exist")]
    RowOutOfRange {
        file: PathBuf,
        sample_id: String,
        row: usize,
        rows: usize,
    },

    #[error("{file}: row {row} has zero norm")]
    ZeroNormRow { file: PathBuf, row: usize },

    #[error("{file}: row {row} contains a non-finite value")]
    NonFiniteRow { file: PathBuf, row: usize },

    #[error("degenerate box [{0}, {1}, {2}, {3}]: needs x_max > x_min and y_max > y_min")]
    DegenerateBox(f64, f64, f64, f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("transformed text vector has zero norm; the model has collapsed")]
    DegenerateModel,

    #[error("score vector has no ground-truth index")]
    MissingGtIndex,

    #[error("ground-truth index {index} out of range for {len} proposals")]
    GtIndexOutOfRange { index: usize, len: usize },

    #[error("{path}: checkpoint format error: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no trainable samples: none of the {0} training samples has a proposal meeting the GT IoU threshold")]
    NoTrainableSamples(usize),

    #[error("{0}: dataset is empty")]
    EmptyDataset(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("gradient check failed: max relative error {max_rel_err:e} exceeds {tol:e}")]
    GradCheckFailed { max_rel_err: f64, tol: f64 },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidConfig(_) => ErrorKind::Config,
            Error::DegenerateModel | Error::NonFinite(_) | Error::GradCheckFailed { .. } => {
                ErrorKind::Numeric
            }
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile { path: path.into() }
        } else {
            Error::Io {
                path: path.into(),
                source,
            }
        }
    }
}
