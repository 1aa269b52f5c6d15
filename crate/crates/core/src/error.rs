use thiserror::Error;

/// Errors surfaced by every module of the crate.
#[derive(Debug, Error)]
pub enum EgsError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("corrupt chunk: {0}")]
    CorruptChunk(String),
    #[error("corrupt state: {0}")]
    CorruptState(String),
    #[error("optimization diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EgsError {
    /// True for errors caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, EgsError::Diverged(_))
    }
}

pub type Result<T, E = EgsError> = std::result::Result<T, E>;
