use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("singular design: {0}")]
    SingularDesign(String),
    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("corrupt bundle array `{name}`: {reason}")]
    CorruptBundle { name: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid_arg(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
