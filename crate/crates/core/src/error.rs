use numcore::NumError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{source_name}:{line}: {detail}")]
    Malformed { source_name: String, line: usize, detail: String },
    #[error("line {line}: unknown concept `{id}`")]
    UnknownConcept { line: usize, id: String },
    #[error("unknown concept `{0}`")]
    Unresolvable(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Num(NumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<NumError> for Error {
    fn from(e: NumError) -> Self {
        match e {
            NumError::NonFinite { op } => Error::Divergence(format!("non-finite value in {op}")),
            other => Error::Num(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
