//! Scalar quantizers with a learnable clip scale.
//!
//! * signed uniform: `round(clamp(x / s, -1, 1) * S) * d`, `S = 2^(m-1) - 1`, `d = s / S`
//! * unsigned uniform (post-ReLU activations): clamp to `[0, 1]`, `S = 2^m - 1`
//! * additive powers of two: nearest level of a fixed codebook, scaled by `s`
//!
//! Rounding sends ties away from zero. A bit-width of 32 on the uniform modes
//! is a full-precision passthrough. A 1-bit signed quantizer is binary:
//! `s * sign(x)` with zero mapped to `+s`.
//!
//! Gradients use the straight-through estimator: rounding is treated as the
//! identity inside the clip range. The scale gradient is the derivative of the
//! clamp with respect to its bound, i.e. `sign(x)` on clipped elements.

use std::fmt;
use std::str::FromStr;

use crate::error::{MwqError, Result};
use crate::tensor::Tensor;

/// Bit-width that disables quantization on the uniform modes.
pub const FULL_PRECISION_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuantMode {
    Signed,
    Unsigned,
    Apot,
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantMode::Signed => "signed",
            QuantMode::Unsigned => "unsigned",
            QuantMode::Apot => "apot",
        })
    }
}

impl FromStr for QuantMode {
    type Err = MwqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "signed" | "uniform" => Ok(QuantMode::Signed),
            "unsigned" => Ok(QuantMode::Unsigned),
            "apot" => Ok(QuantMode::Apot),
            other => Err(MwqError::Config(format!("unknown quantizer mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizerSpec {
    bits: u32,
    mode: QuantMode,
    scale: f32,
    levels: u32,
    step: f32,
}

impl QuantizerSpec {
    pub fn new(bits: u32, mode: QuantMode, scale: f32) -> Result<Self> {
        let levels = match mode {
            QuantMode::Signed if bits == 1 => 1,
            QuantMode::Signed if (2..=FULL_PRECISION_BITS).contains(&bits) => {
                (1u64 << (bits - 1)) as u32 - 1
            }
            QuantMode::Unsigned if (1..=FULL_PRECISION_BITS).contains(&bits) => {
                ((1u64 << bits) - 1) as u32
            }
            QuantMode::Apot if bits == 3 || bits == 4 => (1u32 << (bits - 1)) - 1,
            _ => {
                return Err(MwqError::UnsupportedBits {
                    bits,
                    what: match mode {
                        QuantMode::Signed => "signed quantizer (1..=32)",
                        QuantMode::Unsigned => "unsigned quantizer (1..=32)",
                        QuantMode::Apot => "apot quantizer (3 or 4)",
                    },
                })
            }
        };
        if !(scale.is_finite() && scale > 0.0) {
            return Err(MwqError::Config(format!("clip scale must be positive, got {scale}")));
        }
        Ok(QuantizerSpec {
            bits,
            mode,
            scale,
            levels,
            step: scale / levels as f32,
        })
    }

    pub fn signed(bits: u32, scale: f32) -> Result<Self> {
        Self::new(bits, QuantMode::Signed, scale)
    }

    pub fn unsigned(bits: u32, scale: f32) -> Result<Self> {
        Self::new(bits, QuantMode::Unsigned, scale)
    }

    pub fn apot(bits: u32, scale: f32) -> Result<Self> {
        Self::new(bits, QuantMode::Apot, scale)
    }

    pub fn with_scale(&self, scale: f32) -> Result<Self> {
        Self::new(self.bits, self.mode, scale)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn mode(&self) -> QuantMode {
        self.mode
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    /// Positive level count `S`.
    pub fn levels(&self) -> u32 {
        self.levels
    }

    /// Uniform step `d = s / S`.
    pub fn step(&self) -> f32 {
        self.step
    }

    pub fn is_passthrough(&self) -> bool {
        self.mode != QuantMode::Apot && self.bits == FULL_PRECISION_BITS
    }

    fn clip_range(&self) -> (f32, f32) {
        match self.mode {
            QuantMode::Unsigned => (0.0, 1.0),
            _ => (-1.0, 1.0),
        }
    }

    /// Integer code of a single value on the uniform grid.
    pub fn code(&self, v: f32) -> f32 {
        if self.mode == QuantMode::Signed && self.bits == 1 {
            return if v >= 0.0 { 1.0 } else { -1.0 };
        }
        let (lo, hi) = self.clip_range();
        ((v / self.scale).clamp(lo, hi) * self.levels as f32).round()
    }

    /// Whether `code` is a level this spec can produce.
    pub fn is_valid_code(&self, code: i64) -> bool {
        match self.mode {
            QuantMode::Signed if self.bits == 1 => code == 1 || code == -1,
            QuantMode::Unsigned => (0..=self.levels as i64).contains(&code),
            _ => code.abs() <= self.levels as i64,
        }
    }

    fn quantize_uniform(&self, v: f32) -> f32 {
        if self.is_passthrough() {
            v
        } else {
            self.code(v) * self.step
        }
    }
}

/// Initial clip scale for a tensor: its largest magnitude, so nothing is clipped.
pub fn init_scale(x: &Tensor) -> f32 {
    let m = x.max_abs();
    if m > 0.0 && m.is_finite() {
        m
    } else {
        1.0
    }
}

fn check_finite(x: &Tensor) -> Result<()> {
    match x.first_non_finite() {
        Some((index, value)) => Err(MwqError::NonFiniteInput { index, value }),
        None => Ok(()),
    }
}

/// Quantizes every element according to `spec`'s mode.
pub fn quantize(x: &Tensor, spec: &QuantizerSpec) -> Result<Tensor> {
    check_finite(x)?;
    match spec.mode {
        QuantMode::Apot => quantize_apot(x, spec),
        _ => Ok(x.map(|v| spec.quantize_uniform(v))),
    }
}

/// Clamp without rounding; the function whose exact gradient the STE backward computes.
pub fn clamp_surrogate(x: &Tensor, spec: &QuantizerSpec) -> Result<Tensor> {
    check_finite(x)?;
    if spec.is_passthrough() {
        return Ok(x.clone());
    }
    let s = spec.scale;
    Ok(match spec.mode {
        QuantMode::Unsigned => x.map(|v| v.clamp(0.0, s)),
        _ => x.map(|v| v.clamp(-s, s)),
    })
}

/// Straight-through backward pass: `(grad_x, grad_s)`.
pub fn quantize_backward(
    x: &Tensor,
    upstream: &Tensor,
    spec: &QuantizerSpec,
) -> Result<(Tensor, f32)> {
    x.expect_same_shape(upstream)?;
    if spec.is_passthrough() {
        return Ok((upstream.clone(), 0.0));
    }
    let s = spec.scale;
    let mut grad_s = 0.0f64;
    let mut grad_x = Vec::with_capacity(x.len());
    for (&v, &u) in x.data().iter().zip(upstream.data()) {
        match spec.mode {
            QuantMode::Unsigned => {
                if v > s {
                    grad_s += u as f64;
                    grad_x.push(0.0);
                } else if v < 0.0 {
                    grad_x.push(0.0);
                } else {
                    grad_x.push(u);
                }
            }
            _ => {
                if v.abs() > s {
                    grad_s += (u * v.signum()) as f64;
                    grad_x.push(0.0);
                } else {
                    grad_x.push(u);
                }
            }
        }
    }
    Ok((Tensor::from_vec(x.shape(), grad_x)?, grad_s as f32))
}

/// Non-negative magnitudes of the additive-powers-of-two codebook, ascending,
/// normalized so the largest is 1.
///
/// * 4 bits: `p1 + p2` with `p1 in {0, 1, 2^-2, 2^-4}` and `p2 in {0, 2^-1}`,
///   giving 8 distinct magnitudes that interleave even and odd exponents.
/// * 3 bits: plain powers of two `{0, 2^-2, 2^-1, 1}`.
///
/// Mirrored around zero this yields `2^m - 1` signed levels.
pub fn apot_magnitudes(bits: u32) -> Result<Vec<f32>> {
    let mut mags: Vec<f64> = match bits {
        4 => {
            let p1 = [0.0, 1.0, 0.25, 0.0625];
            let p2 = [0.0, 0.5];
            p1.iter().flat_map(|a| p2.iter().map(move |b| a + b)).collect()
        }
        3 => vec![0.0, 0.25, 0.5, 1.0],
        _ => {
            return Err(MwqError::UnsupportedBits {
                bits,
                what: "apot quantizer (3 or 4)",
            })
        }
    };
    mags.sort_by(f64::total_cmp);
    mags.dedup();
    let max = *mags.last().unwrap();
    Ok(mags.into_iter().map(|m| (m / max) as f32).collect())
}

/// Full signed codebook in ascending order.
pub fn apot_codebook(bits: u32) -> Result<Vec<f32>> {
    let mags = apot_magnitudes(bits)?;
    let mut levels: Vec<f32> = mags.iter().skip(1).rev().map(|m| -m).collect();
    levels.extend(mags);
    Ok(levels)
}

/// Projects `x / s` onto the nearest codebook level and scales back by `s`.
///
/// Inputs exactly halfway between two levels go to the larger magnitude.
pub fn quantize_apot(x: &Tensor, spec: &QuantizerSpec) -> Result<Tensor> {
    if spec.mode != QuantMode::Apot {
        return Err(MwqError::Config(format!(
            "quantize_apot called with a {} quantizer",
            spec.mode
        )));
    }
    check_finite(x)?;
    let mags = apot_magnitudes(spec.bits)?;
    let mids: Vec<f32> = mags.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let s = spec.scale;
    Ok(x.map(|v| {
        let a = (v / s).abs().min(1.0);
        let idx = mids.partition_point(|&m| m <= a);
        (mags[idx] * s).copysign(v)
    }))
}
