//! High-frequency enhancement: decompose, scale every detail band by `alpha`, reconstruct.

use crate::error::{MwqError, Result};
use crate::tensor::Tensor;
use crate::wavelet::{self, SubbandSet, WaveletBasis, WaveletName};

pub const DEFAULT_ALPHA: f32 = 1.2;

#[derive(Debug, Clone, PartialEq)]
pub struct EnhanceLayer {
    basis: WaveletName,
    levels: usize,
    pub alpha: f32,
}

impl EnhanceLayer {
    pub fn new(basis: WaveletName, levels: usize, alpha: f32) -> Result<Self> {
        if levels == 0 {
            return Err(MwqError::Config("enhancement needs at least one level".into()));
        }
        if !alpha.is_finite() {
            return Err(MwqError::Config(format!("alpha must be finite, got {alpha}")));
        }
        Ok(Self { basis, levels, alpha })
    }

    pub fn with_default_alpha(basis: WaveletName, levels: usize) -> Result<Self> {
        Self::new(basis, levels, DEFAULT_ALPHA)
    }

    pub fn basis(&self) -> WaveletName {
        self.basis
    }

    pub fn levels(&self) -> usize {
        self.levels
    }
}

/// State kept from [`enhance_forward`] for [`enhance_backward`].
#[derive(Debug, Clone)]
pub struct EnhanceCache {
    basis: WaveletBasis,
    levels: usize,
    alpha: f32,
    /// Reconstruction from the detail bands alone (approximation band zeroed).
    detail: Tensor,
}

fn scaled(sb: &SubbandSet, low: f32, high: f32) -> Result<SubbandSet> {
    sb.try_map_bands(|id, t| {
        Ok(match id {
            wavelet::SubbandId::Low { .. } => t.scale(low),
            wavelet::SubbandId::High { .. } => t.scale(high),
        })
    })
}

pub fn enhance(x: &Tensor, layer: &EnhanceLayer) -> Result<Tensor> {
    let basis = WaveletBasis::new(layer.basis);
    let sb = wavelet::wavedec2(x, &basis, layer.levels)?;
    wavelet::waverec2(&scaled(&sb, 1.0, layer.alpha)?)
}

pub fn enhance_forward(x: &Tensor, layer: &EnhanceLayer) -> Result<(Tensor, EnhanceCache)> {
    let basis = WaveletBasis::new(layer.basis);
    let sb = wavelet::wavedec2(x, &basis, layer.levels)?;
    let out = wavelet::waverec2(&scaled(&sb, 1.0, layer.alpha)?)?;
    let detail = wavelet::waverec2(&scaled(&sb, 0.0, 1.0)?)?;
    let cache = EnhanceCache {
        basis,
        levels: layer.levels,
        alpha: layer.alpha,
        detail,
    };
    Ok((out, cache))
}

/// Returns `(grad_x, grad_alpha)`.
///
/// The map is symmetric (orthonormal analysis, diagonal band scaling, synthesis),
/// so the input gradient is the enhancement of the upstream gradient.
pub fn enhance_backward(cache: &EnhanceCache, upstream: &Tensor) -> Result<(Tensor, f32)> {
    cache.detail.expect_same_shape(upstream)?;
    let sb = wavelet::waverec2_adjoint(upstream, &cache.basis, cache.levels)?;
    let grad_x = wavelet::wavedec2_adjoint(&scaled(&sb, 1.0, cache.alpha)?)?;
    let grad_alpha = upstream.dot(&cache.detail)? as f32;
    Ok((grad_x, grad_alpha))
}
