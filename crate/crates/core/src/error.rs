use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MwqError>;

#[derive(Debug, Error)]
pub enum MwqError {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid length {len}: {reason}")]
    InvalidLength { len: usize, reason: String },

    #[error("unsupported wavelet basis `{0}` (expected haar, db2, sym2 or coif2)")]
    UnsupportedBasis(String),

    #[error("unsupported bit-width {bits} for {what}")]
    UnsupportedBits { bits: u32, what: &'static str },

    #[error("non-finite value {value} at flat index {index}")]
    NonFiniteInput { index: usize, value: f32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("value {value} at index {index} is not on the quantization grid (step {step})")]
    NotQuantized { index: usize, value: f32, step: f32 },

    #[error("malformed {format} data: {reason}")]
    Format {
        format: &'static str,
        reason: String,
    },

    #[error("package contains no layers")]
    EmptyPackage,

    #[error("stale cache: forward ran at parameter version {cache}, model is at {model}")]
    StaleCache { cache: u64, model: u64 },

    #[error("non-finite loss at step {step} (first non-finite activation in layer {layer})")]
    NonFiniteLoss { step: usize, layer: String },

    #[error("dataset error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl MwqError {
    pub(crate) fn format(format: &'static str, reason: impl Into<String>) -> Self {
        MwqError::Format {
            format,
            reason: reason.into(),
        }
    }
}
