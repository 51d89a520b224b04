use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("tokenization error: unknown word `{0}`")]
    Tokenize(String),
    #[error("capacity error: sequence length {len} exceeds maximum {max}")]
    Capacity { len: usize, max: usize },
    #[error("generation error: {0}")]
    Generation(String),
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("load error in section `{section}`: {msg}")]
    Load { section: String, msg: String },
    #[error("verifier error: {0}")]
    Verifier(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
