//! Multiscale wavelet quantization: decompose, quantize every subband with its
//! own clip scale, reconstruct.

use crate::error::{MwqError, Result};
use crate::quantizer::{self, QuantizerSpec, FULL_PRECISION_BITS};
use crate::tensor::Tensor;
use crate::wavelet::{self, SubbandId, SubbandSet, WaveletBasis, WaveletName};

/// Per-subband bit allocation `[ll, lh, hl, hh]` plus optional learned scales.
///
/// For deeper decompositions the `lh/hl/hh` entries are shared by every level.
#[derive(Debug, Clone, PartialEq)]
pub struct MwqConfig {
    basis: WaveletName,
    levels: usize,
    bits: [u32; 4],
    scales: Option<Vec<f32>>,
}

impl MwqConfig {
    pub fn new(basis: WaveletName, levels: usize, bits: [u32; 4]) -> Result<Self> {
        if levels == 0 {
            return Err(MwqError::Config("levels must be >= 1".into()));
        }
        if let Some(&b) = bits.iter().find(|&&b| !(1..=FULL_PRECISION_BITS).contains(&b)) {
            return Err(MwqError::UnsupportedBits {
                bits: b,
                what: "subband quantizer (1..=32)",
            });
        }
        Ok(MwqConfig {
            basis,
            levels,
            bits,
            scales: None,
        })
    }

    /// Uniform bit-width on every subband.
    pub fn uniform(basis: WaveletName, levels: usize, bits: u32) -> Result<Self> {
        Self::new(basis, levels, [bits; 4])
    }

    /// Attaches clip scales in [`SubbandId::all`] order.
    pub fn with_scales(mut self, scales: Vec<f32>) -> Result<Self> {
        if scales.len() != self.band_count() {
            return Err(MwqError::Config(format!(
                "{} scales for {} subbands",
                scales.len(),
                self.band_count()
            )));
        }
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(MwqError::Config(format!("subband scale must be positive, got {s}")));
        }
        self.scales = Some(scales);
        Ok(self)
    }

    pub fn without_scales(mut self) -> Self {
        self.scales = None;
        self
    }

    pub fn basis(&self) -> WaveletName {
        self.basis
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn bits(&self) -> [u32; 4] {
        self.bits
    }

    pub fn scales(&self) -> Option<&[f32]> {
        self.scales.as_deref()
    }

    pub fn band_count(&self) -> usize {
        1 + 3 * self.levels
    }

    pub fn bits_for(&self, id: SubbandId) -> u32 {
        match id {
            SubbandId::Low { .. } => self.bits[0],
            SubbandId::High { orientation, .. } => match orientation {
                wavelet::Orientation::Lh => self.bits[1],
                wavelet::Orientation::Hl => self.bits[2],
                wavelet::Orientation::Hh => self.bits[3],
            },
        }
    }

    /// Coefficient-weighted mean bit-width: a level-`j` band holds `4^-j` of the coefficients.
    pub fn mean_bits(&self) -> f64 {
        SubbandId::all(self.levels)
            .into_iter()
            .map(|id| self.bits_for(id) as f64 / 4f64.powi(id.level() as i32))
            .sum()
    }

    /// Errors if `shape` cannot be decomposed at this configuration.
    pub fn check_shape(&self, shape: &[usize]) -> Result<()> {
        let probe = Tensor::zeros(shape)?;
        wavelet::wavedec2(&probe, &WaveletBasis::new(self.basis), self.levels).map(|_| ())
    }
}

/// Quantized reconstruction together with the quantized bands that produced it.
#[derive(Debug, Clone)]
pub struct MwqOutput {
    pub xq: Tensor,
    pub subbands: SubbandSet,
    /// One quantizer per band, [`SubbandId::all`] order.
    pub specs: Vec<QuantizerSpec>,
}

/// Quantizers for every band of `sb`, from the config's scales or max-abs initialization.
pub fn band_specs(sb: &SubbandSet, cfg: &MwqConfig) -> Result<Vec<QuantizerSpec>> {
    sb.bands()
        .into_iter()
        .enumerate()
        .map(|(i, (id, band))| {
            let s = match cfg.scales() {
                Some(scales) => scales[i],
                None => quantizer::init_scale(band),
            };
            QuantizerSpec::signed(cfg.bits_for(id), s)
        })
        .collect()
}

fn run(x: &Tensor, cfg: &MwqConfig, surrogate: bool) -> Result<MwqOutput> {
    let basis = WaveletBasis::new(cfg.basis);
    let sb = wavelet::wavedec2(x, &basis, cfg.levels)?;
    let specs = band_specs(&sb, cfg)?;
    let mut i = 0;
    let quantized = sb.try_map_bands(|_, band| {
        let spec = &specs[i];
        i += 1;
        if surrogate {
            quantizer::clamp_surrogate(band, spec)
        } else {
            quantizer::quantize(band, spec)
        }
    })?;
    let xq = wavelet::waverec2(&quantized)?;
    Ok(MwqOutput {
        xq,
        subbands: quantized,
        specs,
    })
}

/// Decompose, quantize each subband, reconstruct.
pub fn mwq_quantize(x: &Tensor, cfg: &MwqConfig) -> Result<MwqOutput> {
    run(x, cfg, false)
}

/// Same pipeline with rounding removed from every subband quantizer.
pub fn mwq_surrogate(x: &Tensor, cfg: &MwqConfig) -> Result<MwqOutput> {
    run(x, cfg, true)
}

/// Straight-through backward pass of [`mwq_quantize`].
///
/// Returns the input gradient and one scale gradient per subband.
pub fn mwq_backward(
    x: &Tensor,
    cfg: &MwqConfig,
    specs: &[QuantizerSpec],
    grad_xq: &Tensor,
) -> Result<(Tensor, Vec<f32>)> {
    x.expect_same_shape(grad_xq)?;
    let basis = WaveletBasis::new(cfg.basis);
    let sb = wavelet::wavedec2(x, &basis, cfg.levels)?;
    if specs.len() != sb.band_count() {
        return Err(MwqError::Config(format!(
            "{} quantizers for {} subbands",
            specs.len(),
            sb.band_count()
        )));
    }
    // Adjoint of waverec2.
    let grad_sb = wavelet::waverec2_adjoint(grad_xq, &basis, cfg.levels)?;
    let inputs = sb.bands();
    let mut grad_scales = Vec::with_capacity(specs.len());
    let mut i = 0;
    let grad_bands = grad_sb.try_map_bands(|_, g| {
        let (gx, gs) = quantizer::quantize_backward(inputs[i].1, g, &specs[i])?;
        grad_scales.push(gs);
        i += 1;
        Ok(gx)
    })?;
    // Adjoint of wavedec2.
    let grad_x = wavelet::wavedec2_adjoint(&grad_bands)?;
    Ok((grad_x, grad_scales))
}

/// Distinct values and their multiplicities after snapping values within
/// `tol` of a cluster's first (smallest) member onto it.
pub fn value_histogram(xq: &Tensor, tol: f32) -> Vec<(f32, usize)> {
    let mut values = xq.data().to_vec();
    values.sort_by(f32::total_cmp);
    let mut hist: Vec<(f32, usize)> = Vec::new();
    for v in values {
        match hist.last_mut() {
            Some((rep, count)) if v - *rep <= tol => *count += 1,
            _ => hist.push((v, 1)),
        }
    }
    hist
}

pub fn count_representation_states(xq: &Tensor, tol: f32) -> usize {
    value_histogram(xq, tol).len()
}

/// Per-axis spatial support of one level-`levels` coefficient.
pub fn receptive_field(basis: &WaveletBasis, levels: usize) -> usize {
    let taps = basis.filter_len();
    (1..levels).fold(taps, |rf, _| (rf - 1) * 2 + taps)
}

/// 2-D view used to decompose parameter tensors: `[d0, d1 * d2 * ...]`.
pub fn matrix_view_shape(shape: &[usize]) -> Option<[usize; 2]> {
    match shape {
        [] | [_] => None,
        [rows, rest @ ..] => Some([*rows, rest.iter().product()]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavelet::{dwt2d, idwt2d, Bands2d};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(MwqConfig::new(WaveletName::Haar, 0, [4; 4]).is_err());
        assert!(matches!(
            MwqConfig::new(WaveletName::Haar, 1, [4, 0, 4, 4]),
            Err(MwqError::UnsupportedBits { bits: 0, .. })
        ));
        let cfg = MwqConfig::new(WaveletName::Haar, 2, [4; 4]).unwrap();
        assert!(cfg.clone().with_scales(vec![1.0; 4]).is_err());
        assert!(cfg.clone().with_scales(vec![1.0; 7]).is_ok());
        assert!(cfg.with_scales(vec![0.0; 7]).is_err());
    }

    #[test]
    fn mean_bits_single_level_is_plain_average() {
        let cfg = MwqConfig::new(WaveletName::Haar, 1, [6, 2, 2, 2]).unwrap();
        assert_eq!(cfg.mean_bits(), 3.0);
        let cfg = MwqConfig::new(WaveletName::Coif2, 2, [8, 4, 4, 4]).unwrap();
        // 8/16 + 3*4/16 + 3*4/4
        assert_eq!(cfg.mean_bits(), 0.5 + 0.75 + 3.0);
    }

    #[test]
    fn full_precision_sentinel_reconstructs() {
        let x = random(&[8, 8], 1);
        for name in [WaveletName::Haar, WaveletName::Db2] {
            let cfg = MwqConfig::uniform(name, 1, 32).unwrap();
            let out = mwq_quantize(&x, &cfg).unwrap();
            assert!(out.xq.max_abs_diff(&x).unwrap() < 1e-5);
        }
    }

    #[test]
    fn constant_input_stays_constant() {
        let x = Tensor::new(&[8, 8], 0.37).unwrap();
        let cfg = MwqConfig::new(WaveletName::Db2, 2, [3, 2, 2, 2]).unwrap();
        let out = mwq_quantize(&x, &cfg).unwrap();
        for band in &out.subbands.highs {
            assert!(band.data.data().iter().all(|&v| v == 0.0));
        }
        assert!(out.xq.max_abs_diff(&x).unwrap() < 1e-5);
    }

    #[test]
    fn matches_explicit_pipeline() {
        let basis = WaveletBasis::new(WaveletName::Haar);
        for seed in 0..5 {
            let x = random(&[4, 4], 100 + seed);
            let cfg = MwqConfig::uniform(WaveletName::Haar, 1, 2).unwrap();
            let out = mwq_quantize(&x, &cfg).unwrap();

            let bands = dwt2d(&x, &basis).unwrap();
            let eq11 = |t: &Tensor| {
                let s = t.max_abs();
                let s = if s > 0.0 { s } else { 1.0 };
                let levels = 1.0f32;
                let d = s / levels;
                t.map(|v| ((v / s).clamp(-1.0, 1.0) * levels).round() * d)
            };
            let oracle = idwt2d(
                &Bands2d {
                    ll: eq11(&bands.ll),
                    lh: eq11(&bands.lh),
                    hl: eq11(&bands.hl),
                    hh: eq11(&bands.hh),
                },
                &basis,
            )
            .unwrap();
            assert_eq!(out.xq, oracle);
        }
    }

    #[test]
    fn explicit_scales_are_used() {
        let x = random(&[8, 8], 9);
        let cfg = MwqConfig::uniform(WaveletName::Haar, 1, 4)
            .unwrap()
            .with_scales(vec![0.5, 0.25, 0.25, 0.125])
            .unwrap();
        let out = mwq_quantize(&x, &cfg).unwrap();
        let scales: Vec<f32> = out.specs.iter().map(|s| s.scale()).collect();
        assert_eq!(scales, vec![0.5, 0.25, 0.25, 0.125]);
        assert!(out.subbands.highs[2].data.max_abs() <= 0.125);
    }

    #[test]
    fn states_exceed_spatial_levels() {
        let x = random(&[8, 8], 11);
        let spatial = quantizer::quantize(&x, &QuantizerSpec::signed(4, x.max_abs()).unwrap()).unwrap();
        assert!(count_representation_states(&spatial, 1e-9) <= 15);
        let cfg = MwqConfig::uniform(WaveletName::Haar, 1, 4).unwrap();
        let out = mwq_quantize(&x, &cfg).unwrap();
        assert!(count_representation_states(&out.xq, 1e-9) > 15);
    }

    #[test]
    fn zero_tensor_has_one_state() {
        assert_eq!(count_representation_states(&Tensor::zeros(&[4, 4]).unwrap(), 0.0), 1);
    }

    #[test]
    fn histogram_snaps_within_tolerance() {
        let x = Tensor::from_vec(&[6], vec![0.0, 1.0, 1.0 + 1e-7, 2.0, -1.0, 1.0]).unwrap();
        assert_eq!(
            value_histogram(&x, 1e-6),
            vec![(-1.0, 1), (0.0, 1), (1.0, 3), (2.0, 1)]
        );
        assert_eq!(count_representation_states(&x, 0.0), 5);
    }

    #[test]
    fn receptive_fields() {
        let haar = WaveletBasis::new(WaveletName::Haar);
        let db2 = WaveletBasis::new(WaveletName::Db2);
        assert_eq!(receptive_field(&haar, 1), 2);
        assert_eq!(receptive_field(&db2, 1), 4);
        assert_eq!(receptive_field(&haar, 2), 4);
        assert_eq!(receptive_field(&db2, 2), 10);
    }

    #[test]
    fn haar_blocks_are_local() {
        let x = random(&[8, 8], 12);
        let cfg = MwqConfig::uniform(WaveletName::Haar, 1, 3)
            .unwrap()
            .with_scales(vec![1.0, 0.6, 0.6, 0.6])
            .unwrap();
        let base = mwq_quantize(&x, &cfg).unwrap().xq;
        // Perturb one 2x2 block; only that block of the output may change.
        let mut y = x.clone();
        for (r, c) in [(2, 4), (2, 5), (3, 4), (3, 5)] {
            y.data_mut()[r * 8 + c] += 0.3;
        }
        let moved = mwq_quantize(&y, &cfg).unwrap().xq;
        for r in 0..8 {
            for c in 0..8 {
                if !(r / 2 == 1 && c / 2 == 2) {
                    assert_eq!(base.get(&[r, c]), moved.get(&[r, c]));
                }
            }
        }
    }

    #[test]
    fn error_shrinks_with_bits() {
        let x = random(&[16, 16], 13);
        let mut last = f64::INFINITY;
        for bits in 2..=8 {
            let cfg = MwqConfig::uniform(WaveletName::Db2, 1, bits).unwrap();
            let xq = mwq_quantize(&x, &cfg).unwrap().xq;
            let rel = (xq.sub(&x).unwrap().norm_sq() / x.norm_sq()).sqrt();
            assert!(rel < last, "bits {bits}: {rel} !< {last}");
            last = rel;
        }
    }

    #[test]
    fn matrix_view() {
        assert_eq!(matrix_view_shape(&[32, 16, 3, 3]), Some([32, 144]));
        assert_eq!(matrix_view_shape(&[8, 4]), Some([8, 4]));
        assert_eq!(matrix_view_shape(&[8]), None);
    }

    #[test]
    fn rejects_incompatible_shape() {
        let cfg = MwqConfig::uniform(WaveletName::Haar, 2, 4).unwrap();
        assert!(mwq_quantize(&random(&[6, 8], 1), &cfg).is_err());
        assert!(cfg.check_shape(&[6, 8]).is_err());
        assert!(cfg.check_shape(&[8, 8]).is_ok());
    }
}
