use std::path::PathBuf;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt image data: {0}")]
    CorruptData(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("masking ratio {beta} needs {needed} hidden cells but at most {max} are independent")]
    InfeasibleScatter { beta: f64, needed: usize, max: usize },
    #[error("scattered mask sampling exhausted {attempts} attempts")]
    SamplingExhausted { attempts: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("cell ({x}, {y}) is already visible")]
    AlreadyVisible { x: usize, y: usize },
    #[error("hidden pixel count {hidden} exceeds the decode cap {cap}")]
    DecodeCapExceeded { hidden: usize, cap: usize },
    #[error("instance of size {0} is too large for exhaustive search")]
    TooLarge(usize),
    #[error("false-positive rate {fpr} is unattainable with {n_bits} bits")]
    UnattainableFpr { n_bits: usize, fpr: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
