use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DsgError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DsgError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} elements")]
    Shape { shape: Vec<usize>, len: usize },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("corrupt block: {0}")]
    Corrupt(String),

    #[error("bad magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("truncated file {path}: need {needed} bytes, have {actual}")]
    Truncated {
        path: PathBuf,
        needed: usize,
        actual: usize,
    },

    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("label {label} at index {index} exceeds class count {classes}")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("training diverged at iteration {iteration}: non-finite values in layer {layer}")]
    Divergence { iteration: u64, layer: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DsgError {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        DsgError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        DsgError::Parameter {
            name,
            reason: reason.into(),
        }
    }
}
