use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    /// A call that the session state machine does not allow at this point.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("unknown item `{0}`")]
    UnknownItem(String),

    #[error("query has no positive constraint and no free text")]
    EmptyQuery,

    #[error("edit instruction is empty")]
    EmptyEdit,

    #[error("no ranked list inside the fusion window ending at turn {0}")]
    EmptyWindow(u32),

    #[error("metric batch is empty")]
    EmptyBatch,

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
