use thiserror::Error;

/// Errors raised anywhere in the enhancement pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("unsupported dimension: {0}")]
    UnsupportedDimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite gradient in parameter `{name}` at index {index}")]
    NonFiniteGradient { name: String, index: usize },
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the filesystem rather than by bad input.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<S: Into<String>>(msg: S) -> Error {
    Error::Dimension(msg.into())
}
