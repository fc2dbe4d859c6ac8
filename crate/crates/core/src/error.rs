use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FidelError {
    #[error("shape mismatch at layer {layer} ({kind}): expected {expected:?}, got {actual:?}")]
    LayerShape {
        layer: usize,
        kind: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid layer configuration: {0}")]
    InvalidLayer(String),

    #[error("invalid loss target: {0}")]
    InvalidTarget(String),

    #[error("model contains no dense layer")]
    NoDenseLayer,

    #[error("model specs differ: {0}")]
    SpecMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("{path}: bad magic number, expected {expected:#010x}, found {actual:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        actual: u32,
    },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl FidelError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        FidelError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        FidelError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = FidelError> = std::result::Result<T, E>;
