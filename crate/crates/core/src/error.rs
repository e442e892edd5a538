use std::path::PathBuf;

/// Errors produced anywhere in the lighting pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("degenerate exposure: {0}")]
    DegenerateExposure(String),

    #[error("ill-conditioned system: {0}; use a ridge weight lambda > 0")]
    IllConditioned(String),

    #[error("resource budget exceeded: need {required} matrix entries, budget is {budget}")]
    Resource { required: u64, budget: u64 },

    #[error("invalid state: {0}")]
    State(String),

    #[error("training diverged at epoch {epoch} (last good epoch: {last_good:?}): {message}")]
    TrainingDiverged {
        epoch: usize,
        last_good: Option<usize>,
        message: String,
    },

    #[error("dataset error in row {row}: {message}")]
    Dataset { row: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
