use thiserror::Error;

/// Errors raised across dataset handling, model construction, training and attacks.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("split error: {0}")]
    Split(String),
    #[error("construction error: {0}")]
    Construction(String),
    #[error("model format error: {0}")]
    ModelFormat(String),
    #[error("training diverged at epoch {epoch} step {step}: {msg}")]
    Divergence { epoch: usize, step: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
