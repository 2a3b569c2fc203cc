//! Multiscale wavelet quantization.
//!
//! Tensors are decomposed with an orthogonal wavelet transform, each subband
//! is quantized with its own clip scale, and the quantized bands are either
//! reconstructed (for quantization-aware training) or bit-packed for storage.

pub mod checkpoint;
pub mod compress;
pub mod enhance;
pub mod error;
pub mod gradcheck;
pub mod mwq;
pub mod nn;
pub mod pgm;
pub mod quantizer;
pub mod tensor;
pub mod wavelet;

pub use error::{MwqError, Result};
pub use tensor::Tensor;
