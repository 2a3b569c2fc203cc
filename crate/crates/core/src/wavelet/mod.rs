//! Orthogonal discrete wavelet transforms with periodic boundary handling.
//!
//! Analysis is a strided periodic correlation with the low/high taps; synthesis
//! scatters each coefficient back through the same taps. With orthonormal
//! filters the two are exact adjoints, so synthesis is also the backward pass
//! of analysis and vice versa.
//!
//! Subband naming: the first letter is the filter applied along the height
//! axis, the second along the width axis. `lh` therefore carries horizontal
//! (width-direction) high-frequency content.

mod basis;

pub use basis::{basis_filters, WaveletBasis, WaveletName};

use std::fmt;

use crate::error::{MwqError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Orientation {
    Lh,
    Hl,
    Hh,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::Lh, Orientation::Hl, Orientation::Hh];

    pub fn as_str(self) -> &'static str {
        match self {
            Orientation::Lh => "lh",
            Orientation::Hl => "hl",
            Orientation::Hh => "hh",
        }
    }
}

/// Identifies one band of a multi-level decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SubbandId {
    Low { level: usize },
    High { level: usize, orientation: Orientation },
}

impl SubbandId {
    /// Canonical order: `LL_J`, then `lh, hl, hh` from level `J` down to 1.
    pub fn all(levels: usize) -> Vec<SubbandId> {
        let mut ids = vec![SubbandId::Low { level: levels }];
        for level in (1..=levels).rev() {
            for orientation in Orientation::ALL {
                ids.push(SubbandId::High { level, orientation });
            }
        }
        ids
    }

    pub fn level(&self) -> usize {
        match *self {
            SubbandId::Low { level } | SubbandId::High { level, .. } => level,
        }
    }
}

impl fmt::Display for SubbandId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubbandId::Low { level } => write!(f, "ll{level}"),
            SubbandId::High { level, orientation } => write!(f, "{}{level}", orientation.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HighBand {
    pub level: usize,
    pub orientation: Orientation,
    pub data: Tensor,
}

/// Output of [`wavedec2`]: one approximation band and `3 * levels` detail bands.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandSet {
    pub basis: WaveletBasis,
    pub levels: usize,
    pub low: Tensor,
    /// Detail bands in canonical order (coarsest level first).
    pub highs: Vec<HighBand>,
    pub original_shape: Vec<usize>,
}

impl SubbandSet {
    /// All bands in [`SubbandId::all`] order.
    pub fn bands(&self) -> Vec<(SubbandId, &Tensor)> {
        let mut out = vec![(SubbandId::Low { level: self.levels }, &self.low)];
        out.extend(self.highs.iter().map(|b| {
            (
                SubbandId::High {
                    level: b.level,
                    orientation: b.orientation,
                },
                &b.data,
            )
        }));
        out
    }

    pub fn band_count(&self) -> usize {
        1 + self.highs.len()
    }

    /// Rebuilds the set with every band passed through `f`, in canonical order.
    pub fn try_map_bands(
        &self,
        mut f: impl FnMut(SubbandId, &Tensor) -> Result<Tensor>,
    ) -> Result<SubbandSet> {
        let low = f(SubbandId::Low { level: self.levels }, &self.low)?;
        let highs = self
            .highs
            .iter()
            .map(|b| {
                let id = SubbandId::High {
                    level: b.level,
                    orientation: b.orientation,
                };
                Ok(HighBand {
                    level: b.level,
                    orientation: b.orientation,
                    data: f(id, &b.data)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SubbandSet {
            basis: self.basis.clone(),
            levels: self.levels,
            low,
            highs,
            original_shape: self.original_shape.clone(),
        })
    }

    pub fn coefficient_count(&self) -> usize {
        self.low.len() + self.highs.iter().map(|b| b.data.len()).sum::<usize>()
    }

    /// Shape of the bands produced at `level` for this set's original shape.
    pub fn band_shape(&self, level: usize) -> Vec<usize> {
        band_shape(&self.original_shape, level)
    }
}

/// Shape of every subband at `level` of a decomposition of `original`.
pub fn band_shape(original: &[usize], level: usize) -> Vec<usize> {
    let mut shape = original.to_vec();
    let n = shape.len();
    shape[n - 2] >>= level;
    shape[n - 1] >>= level;
    shape
}

/// Strided periodic analysis along the middle axis of an `[outer, n, inner]` view.
fn analyze_axis(
    x: &[f32],
    outer: usize,
    n: usize,
    inner: usize,
    g: &[f32],
    h: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let half = n / 2;
    let mut low = vec![0.0f32; outer * half * inner];
    let mut high = vec![0.0f32; outer * half * inner];
    for o in 0..outer {
        for k in 0..half {
            let dst = (o * half + k) * inner;
            for (t, (&gt, &ht)) in g.iter().zip(h).enumerate() {
                let src = (o * n + (2 * k + t) % n) * inner;
                for i in 0..inner {
                    let v = x[src + i];
                    low[dst + i] += gt * v;
                    high[dst + i] += ht * v;
                }
            }
        }
    }
    (low, high)
}

/// Inverse of [`analyze_axis`]: `x[j] = sum_k low[k] g[j-2k] + high[k] h[j-2k]` (periodic).
fn synthesize_axis(
    low: &[f32],
    high: &[f32],
    outer: usize,
    half: usize,
    inner: usize,
    g: &[f32],
    h: &[f32],
) -> Vec<f32> {
    let n = 2 * half;
    let mut x = vec![0.0f32; outer * n * inner];
    for o in 0..outer {
        for k in 0..half {
            let src = (o * half + k) * inner;
            for (t, (&gt, &ht)) in g.iter().zip(h).enumerate() {
                let dst = (o * n + (2 * k + t) % n) * inner;
                for i in 0..inner {
                    x[dst + i] += gt * low[src + i] + ht * high[src + i];
                }
            }
        }
    }
    x
}

fn check_1d(len: usize, basis: &WaveletBasis) -> Result<()> {
    if !len.is_multiple_of(2) {
        return Err(MwqError::InvalidLength {
            len,
            reason: "signal length must be even".into(),
        });
    }
    if len < basis.filter_len() {
        return Err(MwqError::InvalidLength {
            len,
            reason: format!("shorter than the {}-tap {} filter", basis.filter_len(), basis.name()),
        });
    }
    Ok(())
}

/// Single-level 1-D transform of a vector of even length `>= filter_len`.
pub fn dwt1d(s: &Tensor, basis: &WaveletBasis) -> Result<(Tensor, Tensor)> {
    if s.ndim() != 1 {
        return Err(MwqError::InvalidShape {
            shape: s.shape().to_vec(),
            reason: "dwt1d expects a 1-D tensor".into(),
        });
    }
    let n = s.len();
    check_1d(n, basis)?;
    let (low, high) = analyze_axis(s.data(), 1, n, 1, basis.low_pass(), basis.high_pass());
    Ok((
        Tensor::from_vec(&[n / 2], low)?,
        Tensor::from_vec(&[n / 2], high)?,
    ))
}

pub fn idwt1d(low: &Tensor, high: &Tensor, basis: &WaveletBasis) -> Result<Tensor> {
    low.expect_same_shape(high)?;
    if low.ndim() != 1 {
        return Err(MwqError::InvalidShape {
            shape: low.shape().to_vec(),
            reason: "idwt1d expects 1-D bands".into(),
        });
    }
    let half = low.len();
    let x = synthesize_axis(
        low.data(),
        high.data(),
        1,
        half,
        1,
        basis.low_pass(),
        basis.high_pass(),
    );
    Tensor::from_vec(&[2 * half], x)
}

/// The four bands of a single-level 2-D transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Bands2d {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

fn spatial_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.ndim() < 2 {
        return Err(MwqError::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "2-D transforms need at least two dimensions".into(),
        });
    }
    let n = x.ndim();
    let (h, w) = (x.shape()[n - 2], x.shape()[n - 1]);
    Ok((x.len() / (h * w), h, w))
}

fn dwt2d_kernel(x: &Tensor, basis: &WaveletBasis) -> Result<Bands2d> {
    let (lead, h, w) = spatial_dims(x)?;
    let (g, hp) = (basis.low_pass(), basis.high_pass());
    // Rows first: filter along the width axis and keep every other column.
    let (wl, wh) = analyze_axis(x.data(), lead * h, w, 1, g, hp);
    // Then columns: filter along the height axis and keep every other row.
    let (ll, hl) = analyze_axis(&wl, lead, h, w / 2, g, hp);
    let (lh, hh) = analyze_axis(&wh, lead, h, w / 2, g, hp);
    let shape = band_shape(x.shape(), 1);
    Ok(Bands2d {
        ll: Tensor::from_vec(&shape, ll)?,
        lh: Tensor::from_vec(&shape, lh)?,
        hl: Tensor::from_vec(&shape, hl)?,
        hh: Tensor::from_vec(&shape, hh)?,
    })
}

fn check_even_spatial(x: &Tensor, min: usize) -> Result<()> {
    let (_, h, w) = spatial_dims(x)?;
    for len in [h, w] {
        if len % 2 != 0 {
            return Err(MwqError::InvalidLength {
                len,
                reason: "spatial extent must be even".into(),
            });
        }
        if len < min {
            return Err(MwqError::InvalidLength {
                len,
                reason: format!("spatial extent below the filter length {min}"),
            });
        }
    }
    Ok(())
}

/// Single-level separable 2-D transform over the last two axes.
///
/// Leading axes (batch, channel) are transformed independently.
pub fn dwt2d(x: &Tensor, basis: &WaveletBasis) -> Result<Bands2d> {
    check_even_spatial(x, basis.filter_len())?;
    dwt2d_kernel(x, basis)
}

/// Inverse of [`dwt2d`].
pub fn idwt2d(bands: &Bands2d, basis: &WaveletBasis) -> Result<Tensor> {
    let Bands2d { ll, lh, hl, hh } = bands;
    ll.expect_same_shape(lh)?;
    ll.expect_same_shape(hl)?;
    ll.expect_same_shape(hh)?;
    let (lead, h2, w2) = spatial_dims(ll)?;
    let (g, hp) = (basis.low_pass(), basis.high_pass());
    let wl = synthesize_axis(ll.data(), hl.data(), lead, h2, w2, g, hp);
    let wh = synthesize_axis(lh.data(), hh.data(), lead, h2, w2, g, hp);
    // Interleave the width-low and width-high halves back along the width axis.
    let x = synthesize_axis(&wl, &wh, lead * 2 * h2, w2, 1, g, hp);
    let mut shape = ll.shape().to_vec();
    let n = shape.len();
    shape[n - 2] *= 2;
    shape[n - 1] *= 2;
    Tensor::from_vec(&shape, x)
}

/// Backward pass of [`dwt2d`]: maps band gradients to an input gradient.
pub fn dwt2d_adjoint(grad_bands: &Bands2d, basis: &WaveletBasis) -> Result<Tensor> {
    idwt2d(grad_bands, basis)
}

/// Backward pass of [`idwt2d`]: maps an output gradient to band gradients.
pub fn idwt2d_adjoint(grad: &Tensor, basis: &WaveletBasis) -> Result<Bands2d> {
    check_even_spatial(grad, 2)?;
    dwt2d_kernel(grad, basis)
}

/// `levels`-deep decomposition, recursing on the approximation band.
///
/// The spatial extents must be divisible by `2^levels` and at least the filter
/// length; deeper levels only need even extents since periodization keeps the
/// transform orthonormal for any even length.
pub fn wavedec2(x: &Tensor, basis: &WaveletBasis, levels: usize) -> Result<SubbandSet> {
    if levels == 0 {
        return Err(MwqError::Config("decomposition needs at least one level".into()));
    }
    check_even_spatial(x, basis.filter_len())?;
    let (_, h, w) = spatial_dims(x)?;
    let block = 1usize
        .checked_shl(levels as u32)
        .filter(|b| h % b == 0 && w % b == 0)
        .ok_or_else(|| MwqError::InvalidLength {
            len: if h % 2 == 0 { w } else { h },
            reason: format!("extents {h}x{w} not divisible by 2^{levels}"),
        })?;
    debug_assert!(h >= block && w >= block);

    let mut highs = Vec::with_capacity(3 * levels);
    let mut current = x.clone();
    for level in 1..=levels {
        let bands = dwt2d_kernel(&current, basis)?;
        highs.push([
            HighBand { level, orientation: Orientation::Lh, data: bands.lh },
            HighBand { level, orientation: Orientation::Hl, data: bands.hl },
            HighBand { level, orientation: Orientation::Hh, data: bands.hh },
        ]);
        current = bands.ll;
    }
    Ok(SubbandSet {
        basis: basis.clone(),
        levels,
        low: current,
        highs: highs.into_iter().rev().flatten().collect(),
        original_shape: x.shape().to_vec(),
    })
}

/// Inverse of [`wavedec2`].
pub fn waverec2(sb: &SubbandSet) -> Result<Tensor> {
    if sb.levels == 0 || sb.highs.len() != 3 * sb.levels {
        return Err(MwqError::Config(format!(
            "{} detail bands do not match {} levels",
            sb.highs.len(),
            sb.levels
        )));
    }
    let expect = |t: &Tensor, level: usize| -> Result<()> {
        let want = sb.band_shape(level);
        if t.shape() != want.as_slice() {
            return Err(MwqError::ShapeMismatch {
                expected: want,
                actual: t.shape().to_vec(),
            });
        }
        Ok(())
    };
    expect(&sb.low, sb.levels)?;
    let mut current = sb.low.clone();
    for (chunk, level) in sb.highs.chunks(3).zip((1..=sb.levels).rev()) {
        let band = |o: Orientation| -> Result<&Tensor> {
            chunk
                .iter()
                .find(|b| b.level == level && b.orientation == o)
                .map(|b| &b.data)
                .ok_or_else(|| {
                    MwqError::Config(format!("missing {}{level} band", o.as_str()))
                })
        };
        let (lh, hl, hh) = (band(Orientation::Lh)?, band(Orientation::Hl)?, band(Orientation::Hh)?);
        for t in [lh, hl, hh] {
            expect(t, level)?;
        }
        current = idwt2d(
            &Bands2d {
                ll: current,
                lh: lh.clone(),
                hl: hl.clone(),
                hh: hh.clone(),
            },
            &sb.basis,
        )?;
    }
    Ok(current)
}

/// Backward pass of [`wavedec2`].
pub fn wavedec2_adjoint(grad: &SubbandSet) -> Result<Tensor> {
    waverec2(grad)
}

/// Backward pass of [`waverec2`]: decomposes the output gradient like the forward input.
pub fn waverec2_adjoint(grad: &Tensor, basis: &WaveletBasis, levels: usize) -> Result<SubbandSet> {
    wavedec2(grad, basis, levels)
}

/// A set with the same geometry as `sb` and every band zero.
pub fn zeros_like(sb: &SubbandSet) -> SubbandSet {
    sb.try_map_bands(|_, t| Ok(t.zeros_like()))
        .expect("zeroing preserves shapes")
}
