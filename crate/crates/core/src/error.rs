use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("client {client_id} failed: {source}")]
    Client {
        client_id: u32,
        #[source]
        source: Box<Error>,
    },

    #[error("cannot partition {items} items across {clients} clients")]
    TooManyClients { items: usize, clients: usize },

    #[error("heterogeneous partitioning requires a classification dataset (h = {0})")]
    HeterogeneousRegression(f64),

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("{path}: column {column} out of range (row has {width} columns)")]
    ColumnOutOfRange {
        path: PathBuf,
        column: usize,
        width: usize,
    },

    #[error("IDX format error in {path}: {message}")]
    Idx { path: PathBuf, message: String },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported sample file version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated payload: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("trailing bytes: expected {expected} bytes, have {actual}")]
    TrailingBytes { expected: usize, actual: usize },

    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("non-finite value at index {0} of sample payload")]
    NonFinitePayload(usize),

    #[error("config error at line {line}, key `{key}`: {message}")]
    Config {
        line: usize,
        key: String,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
