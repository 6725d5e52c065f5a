use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("ragged row {row}: expected {expected} fields, found {found}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-numeric or non-finite cell at row {row}, column '{column}': '{value}'")]
    BadCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("label column '{0}' not found in header")]
    MissingLabelColumn(String),
    #[error("label column '{column}' has more than two distinct values ({values:?})")]
    TooManyLabels { column: String, values: Vec<String> },
    #[error("column '{0}' has zero spread")]
    ConstantColumn(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid column index {index} (d = {d})")]
    BadIndex { index: usize, d: usize },
    #[error("duplicate column index {0}")]
    DuplicateIndex(usize),
    #[error("invalid dataset: {0}")]
    InvalidData(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid mixture specification: {0}")]
    InvalidMixture(String),
    #[error("unreachable point: every kernel weight underflows to zero")]
    UnreachablePoint,
    #[error("degenerate partition: {0}")]
    DegeneratePartition(String),
    #[error("no candidate signal bandwidth")]
    NoCandidateBandwidth,
    #[error("bootstrap replicates B = {got} too small; at least {min} required")]
    TooFewReplicates { got: usize, min: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
