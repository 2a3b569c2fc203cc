//! Binary greyscale PGM (`P5`) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{MwqError, Result};
use crate::tensor::Tensor;

/// Reads a `P5` image as an `[H, W]` tensor of raw sample values (0..=maxval).
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let err = |reason: &str| MwqError::format("pgm", reason.to_string());
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // Skip whitespace and comments between header fields.
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| err("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(err("only binary P5 images are supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| err("malformed header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(err("invalid dimensions or maxval"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let wide = maxval > 255;
    let need = w * h * if wide { 2 } else { 1 };
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| err("raster shorter than width*height"))?;
    let data = if wide {
        raster
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32)
            .collect()
    } else {
        raster.iter().map(|&b| b as f32).collect()
    };
    Tensor::from_vec(&[h, w], data)
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

/// Encodes an `[H, W]` tensor, rounding and clamping samples to 0..=255.
pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    if image.ndim() != 2 {
        return Err(MwqError::InvalidShape {
            shape: image.shape().to_vec(),
            reason: "PGM output needs a 2-D tensor".into(),
        });
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

pub fn write(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    fs::write(path, encode(image)?)?;
    Ok(())
}

/// Affinely maps `[min, max]` of `t` onto `[0, 255]`; constant tensors map to 0.
pub fn rescale_for_display(t: &Tensor) -> (Tensor, f32, f32) {
    let (lo, hi) = t
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let scaled = if span > 0.0 {
        t.map(|v| (v - lo) / span * 255.0)
    } else {
        t.zeros_like()
    };
    (scaled, lo, hi)
}
