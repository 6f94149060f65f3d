use std::path::PathBuf;

use thiserror::Error;
use varsr_numerics::NumericsError;

#[derive(Debug, Error)]
pub enum VarsrError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index {index} out of range (bound {bound}) in {context}")]
    Index {
        context: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: parse error at byte {offset}: {detail}")]
    Parse {
        path: PathBuf,
        offset: usize,
        detail: String,
    },
    #[error("generation error: {0}")]
    Generation(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("image {height}x{width} too small for target {target}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        target: usize,
    },
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, VarsrError>;

impl VarsrError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn shape<T>(detail: impl Into<String>) -> Result<T> {
    Err(VarsrError::Shape(detail.into()))
}

pub(crate) fn config<T>(detail: impl Into<String>) -> Result<T> {
    Err(VarsrError::Config(detail.into()))
}
