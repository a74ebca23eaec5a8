use thiserror::Error;

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("program cannot be executed on this passage: {0}")]
    UnsupportedProgram(String),
    #[error("parse error at position {position}: {message}")]
    Parse { position: usize, message: String },
    #[error("type error: {0}")]
    Type(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl ModelError {
    pub fn shape(msg: impl Into<String>) -> Self {
        ModelError::Shape(msg.into())
    }
}
