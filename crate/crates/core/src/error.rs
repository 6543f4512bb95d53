use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("transition attempted on a finished episode")]
    EpisodeDone,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("need both classes, got only label {0}")]
    SingleClass(u8),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
