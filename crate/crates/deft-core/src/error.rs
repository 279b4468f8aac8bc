use thiserror::Error;

/// Error taxonomy shared by every module. The CLI maps each variant family to
/// a distinct process exit code, so keep the categories coarse and stable.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes or dimension arithmetic that cannot proceed.
    #[error("shape error: {0}")]
    Shape(String),

    /// An operation whose output would have a non-positive dimension.
    #[error("degenerate output: {0}")]
    Degenerate(String),

    /// Invalid or inconsistent configuration values.
    #[error("config error: {0}")]
    Config(String),

    /// NaN/Inf encountered, or a numeric check failed.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// API misuse: preconditions violated by the caller.
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed persisted artifact (checkpoint, config file, dataset file).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
