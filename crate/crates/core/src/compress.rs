//! Bit-packed storage of quantized subband codes (`.mwq` files).
//!
//! Layout, all multi-byte integers little-endian:
//!
//! ```text
//! file   := "MWQ1" u16:version(=1) u32:layer_count layer*
//! layer  := u16:name_len name u8:kind u8:ndim u32:dim*ndim body
//! body   := kind 0 (wavelet): u8:basis_tag u8:levels u8:bits[4] band*(1+3*levels)
//!         | kind 1 (raw):     f32*numel
//! band   := f32:scale u32:count payload
//! ```
//!
//! A band payload holds `count` two's-complement codes of the band's bit-width,
//! packed MSB-first and zero-padded to a whole byte. Bands follow
//! [`SubbandId::all`] order; parameter tensors are decomposed through their
//! `[d0, d1*d2*...]` matrix view.

use std::fs;
use std::path::Path;

use crate::error::{MwqError, Result};
use crate::mwq::{self, MwqConfig, MwqOutput};
use crate::quantizer::QuantizerSpec;
use crate::tensor::Tensor;
use crate::wavelet::{self, HighBand, SubbandId, SubbandSet, WaveletBasis, WaveletName};

pub const MAGIC: &[u8; 4] = b"MWQ1";
pub const VERSION: u16 = 1;

const KIND_WAVELET: u8 = 0;
const KIND_RAW: u8 = 1;

/// Widest code the package format stores.
pub const MAX_PACKED_BITS: u32 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBand {
    pub scale: f32,
    pub bits: u32,
    pub codes: Vec<i32>,
}

impl QuantizedBand {
    fn spec(&self) -> Result<QuantizerSpec> {
        QuantizerSpec::signed(self.bits, self.scale)
    }

    pub fn payload_len(&self) -> usize {
        packed_len(self.codes.len(), self.bits)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerPayload {
    Wavelet {
        basis: WaveletName,
        levels: usize,
        bits: [u32; 4],
        bands: Vec<QuantizedBand>,
    },
    /// Tensors that cannot be decomposed (biases, odd extents) stay in `f32`.
    Raw(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: LayerPayload,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuantizedPackage {
    pub layers: Vec<LayerRecord>,
}

/// Bytes needed for `count` codes of `bits` each.
pub fn packed_len(count: usize, bits: u32) -> usize {
    (count * bits as usize).div_ceil(8)
}

struct BitWriter<'a> {
    out: &'a mut Vec<u8>,
    acc: u64,
    filled: u32,
}

impl<'a> BitWriter<'a> {
    fn new(out: &'a mut Vec<u8>) -> Self {
        BitWriter { out, acc: 0, filled: 0 }
    }

    fn push(&mut self, value: u32, bits: u32) {
        self.acc = (self.acc << bits) | (value as u64 & ((1u64 << bits) - 1));
        self.filled += bits;
        while self.filled >= 8 {
            self.filled -= 8;
            self.out.push((self.acc >> self.filled) as u8);
        }
    }

    fn finish(self) {
        if self.filled > 0 {
            self.out.push((self.acc << (8 - self.filled)) as u8);
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    acc: u64,
    filled: u32,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        BitReader { bytes, pos: 0, acc: 0, filled: 0 }
    }

    fn pull(&mut self, bits: u32) -> Result<u32> {
        while self.filled < bits {
            let byte = *self
                .bytes
                .get(self.pos)
                .ok_or_else(|| MwqError::format("mwq", "band payload truncated"))?;
            self.pos += 1;
            self.acc = (self.acc << 8) | byte as u64;
            self.filled += 8;
        }
        self.filled -= bits;
        Ok(((self.acc >> self.filled) & ((1u64 << bits) - 1)) as u32)
    }
}

/// Packs signed codes MSB-first at a fixed width.
pub fn pack_codes(codes: &[i32], bits: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(packed_len(codes.len(), bits));
    let mut w = BitWriter::new(&mut out);
    for &c in codes {
        // One-bit codes are binary signs: bit 1 is +1 and bit 0 is -1.
        let v = if bits == 1 { (c > 0) as u32 } else { c as u32 };
        w.push(v, bits);
    }
    w.finish();
    out
}

/// Inverse of [`pack_codes`], sign-extending each code.
pub fn unpack_codes(bytes: &[u8], count: usize, bits: u32) -> Result<Vec<i32>> {
    let mut r = BitReader::new(bytes);
    let shift = 32 - bits;
    (0..count)
        .map(|_| {
            r.pull(bits).map(|v| match bits {
                1 => 2 * v as i32 - 1,
                _ => ((v << shift) as i32) >> shift,
            })
        })
        .collect()
}

fn encode_band(band: &Tensor, spec: &QuantizerSpec) -> Result<QuantizedBand> {
    if spec.bits() > MAX_PACKED_BITS {
        return Err(MwqError::UnsupportedBits {
            bits: spec.bits(),
            what: "packed subband (1..=16)",
        });
    }
    let step = spec.step();
    let codes = band
        .data()
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            let ratio = value / step;
            let code = ratio.round();
            if (ratio - code).abs() > 1e-6 * code.abs().max(1.0) || !spec.is_valid_code(code as i64) {
                return Err(MwqError::NotQuantized { index, value, step });
            }
            Ok(code as i32)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedBand {
        scale: spec.scale(),
        bits: spec.bits(),
        codes,
    })
}

/// Stores the integer codes of quantized subbands.
///
/// `cfg` must carry the per-band scales the subbands were quantized with.
pub fn pack_layer(
    name: &str,
    shape: &[usize],
    sb_q: &SubbandSet,
    cfg: &MwqConfig,
) -> Result<LayerRecord> {
    let scales = cfg
        .scales()
        .ok_or_else(|| MwqError::Config("packing needs the subband scales".into()))?;
    if sb_q.band_count() != scales.len() || sb_q.levels != cfg.levels() {
        return Err(MwqError::Config("subband set does not match the configuration".into()));
    }
    let bands = sb_q
        .bands()
        .into_iter()
        .zip(scales)
        .map(|((id, band), &s)| encode_band(band, &QuantizerSpec::signed(cfg.bits_for(id), s)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerRecord {
        name: name.to_string(),
        shape: shape.to_vec(),
        payload: LayerPayload::Wavelet {
            basis: cfg.basis(),
            levels: cfg.levels(),
            bits: cfg.bits(),
            bands,
        },
    })
}

/// Quantizes a parameter tensor through its matrix view and packs it, or
/// stores it raw when the view cannot be decomposed at `cfg`.
///
/// Returns the record and, for packed layers, the in-memory quantization result.
pub fn pack_tensor(
    name: &str,
    tensor: &Tensor,
    cfg: &MwqConfig,
) -> Result<(LayerRecord, Option<MwqOutput>)> {
    let view = mwq::matrix_view_shape(tensor.shape());
    let decomposable = view.is_some_and(|v| cfg.check_shape(&v).is_ok());
    if !decomposable {
        let record = LayerRecord {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            payload: LayerPayload::Raw(tensor.data().to_vec()),
        };
        return Ok((record, None));
    }
    let matrix = tensor.reshape(&view.unwrap())?;
    let out = mwq::mwq_quantize(&matrix, cfg)?;
    let with_scales = cfg
        .clone()
        .with_scales(out.specs.iter().map(|s| s.scale()).collect())?;
    let record = pack_layer(name, tensor.shape(), &out.subbands, &with_scales)?;
    Ok((record, Some(out)))
}

impl LayerRecord {
    /// Decoded subbands of a wavelet record, shaped by the matrix view.
    pub fn unpack_subbands(&self) -> Result<SubbandSet> {
        let LayerPayload::Wavelet { basis, levels, bands, .. } = &self.payload else {
            return Err(MwqError::Config(format!("layer `{}` is stored raw", self.name)));
        };
        let view = mwq::matrix_view_shape(&self.shape)
            .ok_or_else(|| MwqError::format("mwq", "wavelet layer needs at least 2 dims"))?;
        let ids = SubbandId::all(*levels);
        if ids.len() != bands.len() {
            return Err(MwqError::format("mwq", "band count does not match levels"));
        }
        let mut decoded = Vec::with_capacity(bands.len());
        for (id, band) in ids.iter().zip(bands) {
            let shape = wavelet::band_shape(&view, id.level());
            let step = band.spec()?.step();
            let data = band.codes.iter().map(|&c| c as f32 * step).collect();
            decoded.push(Tensor::from_vec(&shape, data)?);
        }
        let mut decoded = decoded.into_iter();
        let low = decoded.next().unwrap();
        let highs = ids[1..]
            .iter()
            .zip(decoded)
            .map(|(id, data)| match *id {
                SubbandId::High { level, orientation } => HighBand { level, orientation, data },
                SubbandId::Low { .. } => unreachable!("low band is first"),
            })
            .collect();
        Ok(SubbandSet {
            basis: WaveletBasis::new(*basis),
            levels: *levels,
            low,
            highs,
            original_shape: view.to_vec(),
        })
    }

    /// Reconstructs the stored tensor in its original shape.
    pub fn restore(&self) -> Result<Tensor> {
        match &self.payload {
            LayerPayload::Raw(data) => Tensor::from_vec(&self.shape, data.clone()),
            LayerPayload::Wavelet { .. } => {
                wavelet::waverec2(&self.unpack_subbands()?)?.reshape(&self.shape)
            }
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn serialized_len(&self) -> usize {
        let head = 2 + self.name.len() + 1 + 1 + 4 * self.shape.len();
        head + match &self.payload {
            LayerPayload::Raw(data) => 4 * data.len(),
            LayerPayload::Wavelet { bands, .. } => {
                6 + bands.iter().map(|b| 8 + b.payload_len()).sum::<usize>()
            }
        }
    }

    fn write(&self, out: &mut Vec<u8>) -> Result<()> {
        let name = self.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| MwqError::Config(format!("layer name too long: {}", self.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        let kind = match self.payload {
            LayerPayload::Wavelet { .. } => KIND_WAVELET,
            LayerPayload::Raw(_) => KIND_RAW,
        };
        out.push(kind);
        let ndim = u8::try_from(self.shape.len())
            .map_err(|_| MwqError::Config("too many dimensions".into()))?;
        out.push(ndim);
        for &d in &self.shape {
            let d = u32::try_from(d).map_err(|_| MwqError::Config("extent exceeds u32".into()))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.payload {
            LayerPayload::Raw(data) => {
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            LayerPayload::Wavelet { basis, levels, bits, bands } => {
                out.push(basis.tag());
                out.push(u8::try_from(*levels).map_err(|_| MwqError::Config("too many levels".into()))?);
                out.extend(bits.iter().map(|&b| b as u8));
                for band in bands {
                    out.extend_from_slice(&band.scale.to_le_bytes());
                    out.extend_from_slice(&(band.codes.len() as u32).to_le_bytes());
                    out.extend(pack_codes(&band.codes, band.bits));
                }
            }
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| MwqError::format("mwq", format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn read_layer(c: &mut Cursor<'_>) -> Result<LayerRecord> {
    let name_len = c.u16()? as usize;
    let name = String::from_utf8(c.take(name_len)?.to_vec())
        .map_err(|_| MwqError::format("mwq", "layer name is not UTF-8"))?;
    let kind = c.u8()?;
    let ndim = c.u8()? as usize;
    let shape = (0..ndim)
        .map(|_| c.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    if shape.is_empty() || shape.contains(&0) {
        return Err(MwqError::format("mwq", format!("layer `{name}` has invalid shape {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    let payload = match kind {
        KIND_RAW => {
            let raw = c.take(4 * numel)?;
            LayerPayload::Raw(
                raw.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            )
        }
        KIND_WAVELET => {
            let tag = c.u8()?;
            let basis = WaveletName::from_tag(tag)
                .ok_or_else(|| MwqError::format("mwq", format!("unknown basis tag {tag}")))?;
            let levels = c.u8()? as usize;
            let mut bits = [0u32; 4];
            for b in &mut bits {
                *b = c.u8()? as u32;
            }
            let cfg = MwqConfig::new(basis, levels, bits)?;
            let bands = SubbandId::all(levels)
                .into_iter()
                .map(|id| {
                    let scale = c.f32()?;
                    let count = c.u32()? as usize;
                    let bits = cfg.bits_for(id);
                    if bits > MAX_PACKED_BITS {
                        return Err(MwqError::format("mwq", format!("band width {bits} exceeds 16")));
                    }
                    let payload = c.take(packed_len(count, bits))?;
                    Ok(QuantizedBand {
                        scale,
                        bits,
                        codes: unpack_codes(payload, count, bits)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            LayerPayload::Wavelet { basis, levels, bits, bands }
        }
        other => return Err(MwqError::format("mwq", format!("unknown layer kind {other}"))),
    };
    Ok(LayerRecord { name, shape, payload })
}

impl QuantizedPackage {
    pub fn serialized_len(&self) -> usize {
        10 + self.layers.iter().map(LayerRecord::serialized_len).sum::<usize>()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.layers.is_empty() {
            return Err(MwqError::EmptyPackage);
        }
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            layer.write(&mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(MwqError::format("mwq", "bad magic"));
        }
        let version = c.u16()?;
        if version != VERSION {
            return Err(MwqError::format("mwq", format!("unsupported version {version}")));
        }
        let count = c.u32()? as usize;
        if count == 0 {
            return Err(MwqError::EmptyPackage);
        }
        let layers = (0..count)
            .map(|_| read_layer(&mut c))
            .collect::<Result<Vec<_>>>()?;
        if c.pos != bytes.len() {
            return Err(MwqError::format("mwq", "trailing bytes after last layer"));
        }
        Ok(QuantizedPackage { layers })
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Size of the same tensors stored as raw `f32`.
    pub fn original_bytes(&self) -> usize {
        4 * self.layers.iter().map(LayerRecord::numel).sum::<usize>()
    }
}

/// `32 / mean bits`, weighting each band by its share of the coefficients.
///
/// Scales and headers are excluded.
pub fn nominal_compression_ratio(cfg: &MwqConfig) -> f64 {
    32.0 / cfg.mean_bits()
}

/// `original_bytes / serialized size`, counting headers, scales and raw layers.
pub fn effective_compression_ratio(pkg: &QuantizedPackage, original_bytes: usize) -> Result<f64> {
    if pkg.layers.is_empty() {
        return Err(MwqError::EmptyPackage);
    }
    if original_bytes == 0 {
        return Err(MwqError::Config("original size must be positive".into()));
    }
    Ok(original_bytes as f64 / pkg.serialized_len() as f64)
}
