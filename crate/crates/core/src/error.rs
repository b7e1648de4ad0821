use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}:{line}: duplicate id `{id}`", path.display())]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },

    #[error("seed `{seed_id}` turn {turn}: {message}")]
    SeedValidation {
        seed_id: String,
        turn: usize,
        message: String,
    },

    #[error("record `{id}` is invalid: {message}")]
    InvalidRecord { id: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("turn budget {budget} unreachable: the pool only holds {available} turns")]
    BudgetUnreachable { budget: usize, available: usize },

    #[error("backend unavailable after {attempts} attempt(s), last status {status:?}: {message}")]
    BackendUnavailable {
        attempts: u32,
        status: Option<u16>,
        message: String,
    },

    #[error("backend rejected the request with status {status}: {message}")]
    BackendRejected { status: u16, message: String },

    #[error("authentication failed with status {0}; check PLACES_API_KEY")]
    Auth(u16),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("reports are not comparable: {0}")]
    Incomparable(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("t-test undefined: {0}")]
    UndefinedTest(String),

    #[error("unknown rating dimension `{0}`")]
    UnknownDimension(String),

    #[error("invalid rating: {0}")]
    InvalidRating(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error came from the generation backend.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            Error::BackendUnavailable { .. } | Error::BackendRejected { .. }
        )
    }
}
