use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied something outside an operation's contract.
    #[error("invalid input: {0}")]
    Validation(String),

    /// Internal state that should never occur, e.g. a "known safe" pose that collides.
    #[error("invariant violated: {0}")]
    Invariant(String),

    /// Malformed or truncated binary container.
    #[error("format error in section `{section}` at byte {offset}: {message}")]
    Format {
        section: String,
        offset: u64,
        message: String,
    },

    /// Non-finite or diverging loss during optimisation.
    #[error("training failed at sample {sample}: {message}")]
    Training { sample: usize, message: String },

    /// Streaming engine used before it was ready.
    #[error("stream engine: {0}")]
    State(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn format(section: &str, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            section: section.to_string(),
            offset,
            message: message.into(),
        }
    }
}
