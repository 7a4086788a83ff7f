use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, IqaError>;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum IqaError {
    #[error("image {height}x{width} too small: stage {stage} would be {stage_height}x{stage_width} (need at least 2x2)")]
    ImageTooSmall {
        stage: usize,
        height: usize,
        width: usize,
        stage_height: usize,
        stage_width: usize,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("weight shape mismatch: {}", format_mismatches(.0))]
    ShapeMismatch(Vec<LayerMismatch>),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },

    #[error("non-finite values produced in {location}")]
    NonFinite { location: String },

    #[error("manifest schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("manifest line {line}: {message}")]
    Row { line: u64, message: String },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error(
        "mode mismatch: checkpoint trained in `{found}` mode, operation requires one of {expected}"
    )]
    ModeMismatch { expected: String, found: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { expected: String, found: String },

    #[error("corrupt checkpoint {path}: {message}")]
    Corrupt { path: PathBuf, message: String },

    #[error("training diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },
}

/// One entry of a weight-container shape report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMismatch {
    pub layer: String,
    pub expected: Vec<usize>,
    pub found: Option<Vec<usize>>,
}

fn format_mismatches(items: &[LayerMismatch]) -> String {
    items
        .iter()
        .map(|m| match &m.found {
            Some(found) => format!("{}: expected {:?}, found {:?}", m.layer, m.expected, found),
            None => format!("{}: expected {:?}, missing", m.layer, m.expected),
        })
        .collect::<Vec<_>>()
        .join("; ")
}

impl IqaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IqaError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        IqaError::Validation(msg.into())
    }
}
