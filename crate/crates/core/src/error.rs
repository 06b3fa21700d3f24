use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or parameters that can never be valid.
    #[error("configuration error: {0}")]
    Config(String),

    /// A valid-looking parallel layout this implementation refuses to run.
    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    /// Collective members disagreed on shard counts or shapes.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("capacity exceeded: {needed} positions requested, context limit is {limit}")]
    Capacity { needed: usize, limit: usize },

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn unsupported(msg: impl Into<String>) -> Self {
        Error::Unsupported(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
}
