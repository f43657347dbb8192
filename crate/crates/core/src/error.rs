use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("sequence is empty")]
    Empty,
    #[error("brute-force DTW limited to {limit} cells, got {cells}")]
    TooLarge { cells: usize, limit: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("probability {0} outside (0, 1)")]
    OutOfRange(f64),
    #[error("triplet class mismatch: {0}")]
    ClassMismatch(String),
    #[error("no initialized prototypes")]
    NoPrototypes,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset has unlabeled samples")]
    MissingLabels,
    #[error("format error: {0}")]
    FormatError(String),
    #[error("sample does not match dataset metadata: {0}")]
    MetaMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
