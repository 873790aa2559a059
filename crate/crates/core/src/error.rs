use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the forecasting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("index out of bounds: {0}")]
    Bounds(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("singular system: rank {rank} of {dim} (rank defect {})", dim - rank)]
    Singular { dim: usize, rank: usize },

    #[error("all sample weights are zero; the weighted fit is undefined")]
    ZeroWeights,

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("all {restarts} restarts failed; last error: {last}")]
    AllRestartsFailed { restarts: usize, last: Box<Error> },

    #[error("unpaired runs in dataset `{dataset}`: run ids {runs:?} are not scored by every method")]
    Unpaired { dataset: String, runs: Vec<u64> },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("too many failed runs: {failed} of {total} exceed the 5% budget")]
    TooManyFailures { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
