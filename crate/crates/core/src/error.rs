use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{rejected} of {total} rows malformed (tolerance {tolerance}); samples: {samples:?}")]
    MalformedInput {
        rejected: usize,
        total: usize,
        tolerance: f64,
        samples: Vec<String>,
    },

    #[error("corpus too sparse: {0}")]
    CorpusTooSparse(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
