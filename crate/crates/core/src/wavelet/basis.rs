use std::fmt;
use std::str::FromStr;

use crate::error::{MwqError, Result};

/// Orthogonal wavelet families supported by the transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WaveletName {
    Haar,
    Db2,
    Sym2,
    Coif2,
}

impl WaveletName {
    pub const ALL: [WaveletName; 4] = [
        WaveletName::Haar,
        WaveletName::Db2,
        WaveletName::Sym2,
        WaveletName::Coif2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WaveletName::Haar => "haar",
            WaveletName::Db2 => "db2",
            WaveletName::Sym2 => "sym2",
            WaveletName::Coif2 => "coif2",
        }
    }

    /// Stable one-byte tag used by the package format.
    pub fn tag(self) -> u8 {
        match self {
            WaveletName::Haar => 0,
            WaveletName::Db2 => 1,
            WaveletName::Sym2 => 2,
            WaveletName::Coif2 => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|n| n.tag() == tag)
    }

    /// Low-pass analysis taps in correlation order: `low[k] = sum_i g[i] * s[2k + i]`.
    fn low_pass(self) -> &'static [f64] {
        match self {
            WaveletName::Haar => &HAAR,
            WaveletName::Db2 => &DB2,
            WaveletName::Sym2 => &SYM2,
            WaveletName::Coif2 => &COIF2,
        }
    }
}

impl fmt::Display for WaveletName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WaveletName {
    type Err = MwqError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "haar" => Ok(WaveletName::Haar),
            "db2" => Ok(WaveletName::Db2),
            "sym2" => Ok(WaveletName::Sym2),
            "coif2" => Ok(WaveletName::Coif2),
            _ => Err(MwqError::UnsupportedBasis(s.to_string())),
        }
    }
}

const HAAR: [f64; 2] = [std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2];

const DB2: [f64; 4] = [
    0.48296291314453416,
    0.8365163037378079,
    0.2241438680420134,
    -0.12940952255126037,
];

// sym2 coincides with db2 up to rounding of the published tables.
const SYM2: [f64; 4] = [
    0.48296291314469025,
    0.836516303737469,
    0.22414386804185735,
    -0.12940952255092145,
];

const COIF2: [f64; 12] = [
    0.01638733646320364,
    -0.04146493678687178,
    -0.0673725547237256,
    0.3861100668227629,
    0.8127236354494135,
    0.4170051844232391,
    -0.07648859907828076,
    -0.05943441864643109,
    0.02368017194684777,
    0.005611434819368834,
    -0.0018232088709110323,
    -0.000720549445520347,
];

/// Orthonormal analysis filter pair. Synthesis reuses the same taps.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletBasis {
    name: WaveletName,
    g: Vec<f32>,
    h: Vec<f32>,
}

impl WaveletBasis {
    pub fn new(name: WaveletName) -> Self {
        let low = name.low_pass();
        let len = low.len();
        // Quadrature mirror: h[k] = (-1)^k g[L-1-k].
        let high: Vec<f64> = (0..len)
            .map(|k| if k % 2 == 0 { 1.0 } else { -1.0 } * low[len - 1 - k])
            .collect();
        let basis = WaveletBasis {
            name,
            g: low.iter().map(|&v| v as f32).collect(),
            h: high.iter().map(|&v| v as f32).collect(),
        };
        debug_assert!(basis.check_invariants(1e-6).is_ok());
        basis
    }

    pub fn name(&self) -> WaveletName {
        self.name
    }

    pub fn low_pass(&self) -> &[f32] {
        &self.g
    }

    pub fn high_pass(&self) -> &[f32] {
        &self.h
    }

    pub fn filter_len(&self) -> usize {
        self.g.len()
    }

    /// DC gain, energy, and quadrature-mirror checks.
    pub fn check_invariants(&self, tol: f64) -> Result<()> {
        let g: Vec<f64> = self.g.iter().map(|&v| v as f64).collect();
        let h: Vec<f64> = self.h.iter().map(|&v| v as f64).collect();
        let len = g.len();
        let fail = |what: &str| Err(MwqError::Config(format!("{} filters violate {what}", self.name)));
        if len == 0 || !len.is_multiple_of(2) {
            return fail("even filter length");
        }
        if (g.iter().sum::<f64>() - std::f64::consts::SQRT_2).abs() > tol {
            return fail("sum(g) == sqrt(2)");
        }
        if h.iter().sum::<f64>().abs() > tol {
            return fail("sum(h) == 0");
        }
        if (g.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() > tol
            || (h.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() > tol
        {
            return fail("unit energy");
        }
        let sign = |k: usize| if k.is_multiple_of(2) { 1.0 } else { -1.0 };
        if (0..len).any(|k| (h[k] - sign(k) * g[len - 1 - k]).abs() > tol) {
            return fail("the quadrature-mirror relation");
        }
        Ok(())
    }
}

/// Looks up a basis by its lowercase name.
pub fn basis_filters(name: &str) -> Result<WaveletBasis> {
    Ok(WaveletBasis::new(name.parse()?))
}
