use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: String,
        got: String,
    },

    #[error("tape for `{network}` is stale: recorded at version {recorded}, parameters now at {current}")]
    StaleTape {
        network: String,
        recorded: u64,
        current: u64,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("row {0:?} is not a codebook entry")]
    InvalidCode(Vec<f64>),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("episode already finished after {0} steps")]
    EpisodeFinished(usize),

    #[error("unknown environment `{0}`")]
    UnknownEnv(String),

    #[error("replay buffer cannot supply a window of {len} transitions")]
    NoWindow { len: usize },

    #[error("checkpoint version error: {0}")]
    CheckpointVersion(String),

    #[error("checkpoint payload truncated: block `{block}` needs {needed} bytes, {available} left")]
    CheckpointTruncated {
        block: String,
        needed: usize,
        available: usize,
    },

    #[error("checkpoint shape mismatch for `{block}`: file has {file}, model has {model}")]
    CheckpointShape {
        block: String,
        file: String,
        model: String,
    },

    #[error("numerical abort: {0}")]
    NumericalAbort(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
