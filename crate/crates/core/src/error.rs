use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate {kind} id `{id}`")]
    DuplicateId { kind: &'static str, id: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("insufficient chain length: {0}")]
    InsufficientLength(String),

    #[error("matrix is rank deficient: {0}")]
    RankDeficient(String),

    #[error("precision matrix is singular")]
    SingularPrecision,

    #[error("gave up after {attempts} attempts: {what}")]
    RetryExhausted { attempts: usize, what: String },

    #[error("training data contains a single class")]
    SingleClass,

    #[error("no sample qualifies for subset `{0}`")]
    EmptySubset(String),

    #[error("strategy `{0}` requires population statistics")]
    MissingStats(&'static str),

    #[error("strategy `{0}` requires domain knowledge snippets")]
    MissingKnowledge(&'static str),

    #[error("LLM transport: {0}")]
    Transport(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Errors caused by bad user input, as opposed to failures while running.
    pub fn is_validation(&self) -> bool {
        if let Error::Io { source, .. } = self {
            // A missing input is a bad argument rather than a failure mid-run.
            return source.kind() == std::io::ErrorKind::NotFound;
        }
        !matches!(
            self,
            Error::Io { .. }
                | Error::Transport(_)
                | Error::RetryExhausted { .. }
                | Error::SingularPrecision
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
