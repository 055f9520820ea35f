//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch ({left} vs {right})")]
    DimensionMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },

    #[error("{op}: empty vector")]
    EmptyVector { op: &'static str },

    #[error("{op}: vector norm below guard threshold ({norm:e})")]
    ZeroNorm { op: &'static str, norm: f64 },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset file not found: {path}")]
    DatasetMissing { path: String },

    #[error("dataset line {line}: expected {expected} fields, found {found}")]
    RaggedRow {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("dataset line {line}: malformed field: {detail}")]
    MalformedField { line: usize, detail: String },

    #[error("dataset labels are not contiguous: label {missing} is absent but {max} is present")]
    NonContiguousLabels { missing: usize, max: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("cannot partition {samples} samples across {clients} clients")]
    TooFewSamples { samples: usize, clients: usize },

    #[error("client {id} has no samples")]
    EmptyClient { id: usize },

    #[error("client {id}: {source}")]
    Client {
        id: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Attach a client id to an error bubbling out of local training.
    pub fn for_client(self, id: usize) -> Error {
        Error::Client {
            id,
            source: Box::new(self),
        }
    }
}
