//! Sequential CNN with per-layer weight and activation quantizers and explicit backprop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::Checkpoint;
use crate::enhance::{self, EnhanceCache, EnhanceLayer};
use crate::error::{MwqError, Result};
use crate::mwq::{self, MwqConfig};
use crate::quantizer::{self, QuantMode, QuantizerSpec};
use crate::tensor::{self, Tensor};
use crate::wavelet::WaveletName;

/// Bit-width of the first and last parameter layers unless overridden.
pub const DEFAULT_EDGE_BITS: u32 = 8;
/// Lower bound kept on every learnable clip scale.
pub const MIN_SCALE: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum WeightScheme {
    Full,
    Spatial { bits: u32, mode: QuantMode },
    Wavelet { basis: WaveletName, levels: usize, bits: [u32; 4] },
}

/// How every parameter layer of a model is quantized.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantScheme {
    pub weights: WeightScheme,
    /// Unsigned bit-width for the input of each parameter layer; `None` leaves activations in float.
    pub act_bits: Option<u32>,
    /// Spatial uniform bit-width of the first and last parameter layers; `None` treats them like the rest.
    pub edge_bits: Option<u32>,
}

impl QuantScheme {
    pub fn full_precision() -> Self {
        QuantScheme {
            weights: WeightScheme::Full,
            act_bits: None,
            edge_bits: None,
        }
    }

    /// `k`-bit spatial weights and activations with 8-bit edge layers.
    pub fn spatial(k: u32, mode: QuantMode) -> Self {
        QuantScheme {
            weights: WeightScheme::Spatial { bits: k, mode },
            act_bits: Some(k),
            edge_bits: Some(DEFAULT_EDGE_BITS),
        }
    }

    /// Wavelet-domain weights with `act_bits` activations and 8-bit edge layers.
    pub fn wavelet(basis: WaveletName, levels: usize, bits: [u32; 4], act_bits: u32) -> Self {
        QuantScheme {
            weights: WeightScheme::Wavelet { basis, levels, bits },
            act_bits: Some(act_bits),
            edge_bits: Some(DEFAULT_EDGE_BITS),
        }
    }

    /// Effective weight bit-width `k`: the coefficient-weighted mean for wavelet schemes.
    pub fn weight_bits(&self) -> Result<Option<f64>> {
        Ok(match &self.weights {
            WeightScheme::Full => None,
            WeightScheme::Spatial { bits, .. } => Some(*bits as f64),
            WeightScheme::Wavelet { basis, levels, bits } => {
                Some(MwqConfig::new(*basis, *levels, *bits)?.mean_bits())
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightQuantKind {
    None,
    Spatial { bits: u32, mode: QuantMode },
    Wavelet(MwqConfig),
}

/// A weight quantizer and its clip scales (empty until the first forward pass).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightQuantizer {
    pub kind: WeightQuantKind,
    pub scales: Vec<f32>,
}

impl WeightQuantizer {
    pub fn none() -> Self {
        WeightQuantizer {
            kind: WeightQuantKind::None,
            scales: Vec::new(),
        }
    }

    pub fn new(kind: WeightQuantKind) -> Self {
        WeightQuantizer { kind, scales: Vec::new() }
    }
}

/// Unsigned quantizer on a layer's input with a learnable clip scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ActQuantizer {
    pub bits: u32,
    pub scale: Option<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// 2-D convolution with stride 1 and the given zero padding.
    Conv { pad: usize },
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayer {
    pub kind: ParamKind,
    pub weight: Tensor,
    pub bias: Tensor,
    pub wq: WeightQuantizer,
    pub aq: Option<ActQuantizer>,
}

impl ParamLayer {
    pub fn conv(weight: Tensor, bias: Tensor, pad: usize) -> Result<Self> {
        if weight.ndim() != 4 || bias.shape() != [weight.shape()[0]] {
            return Err(MwqError::InvalidShape {
                shape: weight.shape().to_vec(),
                reason: "conv weight must be [out, in, kh, kw] with bias [out]".into(),
            });
        }
        Ok(ParamLayer {
            kind: ParamKind::Conv { pad },
            weight,
            bias,
            wq: WeightQuantizer::none(),
            aq: None,
        })
    }

    pub fn linear(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.ndim() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(MwqError::InvalidShape {
                shape: weight.shape().to_vec(),
                reason: "linear weight must be [out, in] with bias [out]".into(),
            });
        }
        Ok(ParamLayer {
            kind: ParamKind::Linear,
            weight,
            bias,
            wq: WeightQuantizer::none(),
            aq: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Param(ParamLayer),
    Relu,
    MaxPool2,
    Flatten,
    Enhance(EnhanceLayer),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Rounding quantizers.
    Quantized,
    /// Clamp-only quantizers: the function the straight-through backward differentiates.
    Surrogate,
}

/// Geometry of the fixed small CNN.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub input: [usize; 3],
    pub classes: usize,
    /// Optional enhancement after the first activation.
    pub enhance: Option<EnhanceLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input: [usize; 3],
    classes: usize,
    names: Vec<String>,
    layers: Vec<Layer>,
    version: u64,
}

enum WeightState {
    None,
    Spatial(QuantizerSpec),
    Wavelet { cfg: MwqConfig, specs: Vec<QuantizerSpec> },
}

enum StepCache {
    Param {
        input: Tensor,
        xq: Tensor,
        wq: Tensor,
        act: Option<QuantizerSpec>,
        weight: WeightState,
    },
    Relu { input: Tensor },
    Pool { argmax: Vec<usize>, in_shape: Vec<usize> },
    Flatten { in_shape: Vec<usize> },
    Enhance(EnhanceCache),
}

/// Intermediate values from [`Model::forward`], bound to the model version that produced them.
pub struct ForwardCache {
    version: u64,
    steps: Vec<StepCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weight: Tensor,
    pub bias: Tensor,
    pub weight_scales: Vec<f32>,
    pub act_scale: Option<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrads {
    Param(ParamGrads),
    Alpha(f32),
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
    pub input: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Weight,
    Bias,
    Scale,
    Alpha,
}

impl Gradients {
    /// Gradient slices in the order of [`Model::param_slots_mut`].
    pub fn slots(&self) -> Vec<(SlotKind, &[f32])> {
        let mut out = Vec::new();
        for g in &self.layers {
            match g {
                LayerGrads::Param(p) => {
                    out.push((SlotKind::Weight, p.weight.data()));
                    out.push((SlotKind::Bias, p.bias.data()));
                    if !p.weight_scales.is_empty() {
                        out.push((SlotKind::Scale, p.weight_scales.as_slice()));
                    }
                    if let Some(s) = &p.act_scale {
                        out.push((SlotKind::Scale, std::slice::from_ref(s)));
                    }
                }
                LayerGrads::Alpha(a) => out.push((SlotKind::Alpha, std::slice::from_ref(a))),
                LayerGrads::None => {}
            }
        }
        out
    }
}

fn max_pool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
        return Err(MwqError::InvalidShape {
            shape: s.to_vec(),
            reason: "2x2 pooling needs [N, C, H, W] with even H and W".into(),
        });
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut argmax = Vec::with_capacity(planes * ho * wo);
    let d = x.data();
    for p in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = (p * h + 2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (p * h + 2 * oy + dy) * w + 2 * ox + dx;
                    if d[i] > d[best] || d[i].is_nan() {
                        best = i;
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(&[s[0], s[1], ho, wo], out)?, argmax))
}

fn add_bias(y: &mut Tensor, bias: &Tensor) {
    let c = bias.len();
    let inner = y.len() / (y.shape()[0] * c);
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        *v += bias.data()[(i / inner) % c];
    }
}

fn bias_grad(grad_y: &Tensor, channels: usize) -> Tensor {
    let inner = grad_y.len() / (grad_y.shape()[0] * channels);
    let mut acc = vec![0.0f64; channels];
    for (i, &g) in grad_y.data().iter().enumerate() {
        acc[(i / inner) % channels] += g as f64;
    }
    Tensor::from_vec(&[channels], acc.into_iter().map(|v| v as f32).collect()).expect("bias shape")
}

fn float_layer(layer: &Layer, x: &Tensor) -> Result<Tensor> {
    Ok(match layer {
        Layer::Param(p) => {
            let mut y = match p.kind {
                ParamKind::Conv { pad } => tensor::conv2d(x, &p.weight, 1, pad)?,
                ParamKind::Linear => tensor::linear(x, &p.weight)?,
            };
            add_bias(&mut y, &p.bias);
            y
        }
        Layer::Relu => x.map(|v| if v < 0.0 { 0.0 } else { v }),
        Layer::MaxPool2 => max_pool2(x)?.0,
        Layer::Flatten => {
            let n = x.shape()[0];
            x.reshape(&[n, x.len() / n.max(1)])?
        }
        Layer::Enhance(e) => enhance::enhance(x, e)?,
    })
}

impl Model {
    /// Builds a model from named layers, checking that shapes chain from `input` to `classes` logits.
    pub fn new(input: [usize; 3], classes: usize, layers: Vec<(String, Layer)>) -> Result<Self> {
        let (names, layers): (Vec<_>, Vec<_>) = layers.into_iter().unzip();
        let model = Model {
            input,
            classes,
            names,
            layers,
            version: 0,
        };
        let probe = Tensor::zeros(&[1, input[0], input[1], input[2]])?;
        let logits = model.clone().forward(&probe, ForwardMode::Quantized)?.0;
        if logits.shape() != [1, classes] {
            return Err(MwqError::ShapeMismatch {
                expected: vec![1, classes],
                actual: logits.shape().to_vec(),
            });
        }
        Ok(model)
    }

    /// conv3x3(16)-ReLU-[enhance]-pool-conv3x3(32)-ReLU-pool-fc(128)-ReLU-fc(classes), He-normal init.
    pub fn toy(spec: &ToySpec, seed: u64) -> Result<Self> {
        let [c, h, w] = spec.input;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(MwqError::InvalidShape {
                shape: spec.input.to_vec(),
                reason: "toy network needs H and W divisible by 4".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he = |shape: &[usize]| -> Result<Tensor> {
            let fan_in: usize = shape[1..].iter().product();
            let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("valid std");
            let n = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())
        };
        let flat = 32 * (h / 4) * (w / 4);
        let mut layers = vec![
            ("conv1".to_string(), Layer::Param(ParamLayer::conv(he(&[16, c, 3, 3])?, Tensor::zeros(&[16])?, 1)?)),
            ("relu1".to_string(), Layer::Relu),
        ];
        if let Some(e) = &spec.enhance {
            layers.push(("enhance1".to_string(), Layer::Enhance(e.clone())));
        }
        layers.extend([
            ("pool1".to_string(), Layer::MaxPool2),
            ("conv2".to_string(), Layer::Param(ParamLayer::conv(he(&[32, 16, 3, 3])?, Tensor::zeros(&[32])?, 1)?)),
            ("relu2".to_string(), Layer::Relu),
            ("pool2".to_string(), Layer::MaxPool2),
            ("flatten".to_string(), Layer::Flatten),
            ("fc1".to_string(), Layer::Param(ParamLayer::linear(he(&[128, flat])?, Tensor::zeros(&[128])?)?)),
            ("relu3".to_string(), Layer::Relu),
            ("fc2".to_string(), Layer::Param(ParamLayer::linear(he(&[spec.classes, 128])?, Tensor::zeros(&[spec.classes])?)?)),
        ]);
        Self::new(spec.input, spec.classes, layers)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn layers(&self) -> impl Iterator<Item = (&str, &Layer)> {
        self.names.iter().map(String::as_str).zip(&self.layers)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer> {
        self.version += 1;
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.layers[i])
    }

    fn param_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| matches!(self.layers[i], Layer::Param(_)))
            .collect()
    }

    /// Installs fresh (uninitialized-scale) quantizers on every parameter layer.
    ///
    /// Wavelet quantization needs a matrix view divisible by `2^J`; incompatible layers
    /// fall back to spatial uniform quantization at the approximation band's bit-width.
    pub fn apply_scheme(&mut self, scheme: &QuantScheme) -> Result<()> {
        let params = self.param_indices();
        let (first, last) = (params[0], *params.last().unwrap());
        for &i in &params {
            let Layer::Param(p) = &mut self.layers[i] else { unreachable!() };
            let edge = (i == first || i == last) && scheme.weights != WeightScheme::Full;
            let edge_bits = scheme.edge_bits.filter(|_| edge);
            let kind = match (&scheme.weights, edge_bits) {
                (WeightScheme::Full, _) => WeightQuantKind::None,
                (_, Some(b)) => WeightQuantKind::Spatial { bits: b, mode: QuantMode::Signed },
                (WeightScheme::Spatial { bits, mode }, None) => {
                    WeightQuantKind::Spatial { bits: *bits, mode: *mode }
                }
                (WeightScheme::Wavelet { basis, levels, bits }, None) => {
                    let cfg = MwqConfig::new(*basis, *levels, *bits)?;
                    let view = mwq::matrix_view_shape(p.weight.shape()).expect("weights are >= 2-D");
                    if cfg.check_shape(&view).is_ok() {
                        WeightQuantKind::Wavelet(cfg)
                    } else {
                        WeightQuantKind::Spatial { bits: bits[0].max(2), mode: QuantMode::Signed }
                    }
                }
            };
            // Validate bit-widths eagerly rather than at the first forward pass.
            if let WeightQuantKind::Spatial { bits, mode } = kind {
                QuantizerSpec::new(bits, mode, 1.0)?;
            }
            p.wq = WeightQuantizer::new(kind);
            p.aq = match scheme.act_bits {
                Some(k) => {
                    let bits = edge_bits.unwrap_or(k);
                    QuantizerSpec::unsigned(bits, 1.0)?;
                    Some(ActQuantizer { bits, scale: None })
                }
                None => None,
            };
        }
        self.version += 1;
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.input {
            let n = s.first().copied().unwrap_or(0);
            return Err(MwqError::ShapeMismatch {
                expected: vec![n, self.input[0], self.input[1], self.input[2]],
                actual: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Runs the network; clip scales that are still unset are initialized to the max magnitude
    /// of the tensor they clip.
    pub fn forward(&mut self, x: &Tensor, mode: ForwardMode) -> Result<(Tensor, ForwardCache)> {
        self.check_input(x)?;
        let quant = |t: &Tensor, spec: &QuantizerSpec| match mode {
            ForwardMode::Quantized => quantizer::quantize(t, spec),
            ForwardMode::Surrogate => quantizer::clamp_surrogate(t, spec),
        };
        let mut steps = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &mut self.layers {
            let (next, step) = match layer {
                Layer::Param(p) => {
                    let act = match &mut p.aq {
                        Some(a) => {
                            let s = *a.scale.get_or_insert_with(|| quantizer::init_scale(&cur));
                            Some(QuantizerSpec::unsigned(a.bits, s)?)
                        }
                        None => None,
                    };
                    let xq = match &act {
                        Some(spec) => quant(&cur, spec)?,
                        None => cur.clone(),
                    };
                    let (wq, weight) = match &p.wq.kind {
                        WeightQuantKind::None => (p.weight.clone(), WeightState::None),
                        WeightQuantKind::Spatial { bits, mode: qm } => {
                            if p.wq.scales.is_empty() {
                                p.wq.scales = vec![quantizer::init_scale(&p.weight)];
                            }
                            let spec = QuantizerSpec::new(*bits, *qm, p.wq.scales[0])?;
                            (quant(&p.weight, &spec)?, WeightState::Spatial(spec))
                        }
                        WeightQuantKind::Wavelet(base) => {
                            let view = mwq::matrix_view_shape(p.weight.shape()).expect("2-D view");
                            let w2 = p.weight.reshape(&view)?;
                            if p.wq.scales.is_empty() {
                                let probe = mwq::mwq_surrogate(&w2, base)?;
                                p.wq.scales = probe.specs.iter().map(|s| s.scale()).collect();
                            }
                            let cfg = base.clone().with_scales(p.wq.scales.clone())?;
                            let out = match mode {
                                ForwardMode::Quantized => mwq::mwq_quantize(&w2, &cfg)?,
                                ForwardMode::Surrogate => mwq::mwq_surrogate(&w2, &cfg)?,
                            };
                            (
                                out.xq.reshape(p.weight.shape())?,
                                WeightState::Wavelet { cfg, specs: out.specs },
                            )
                        }
                    };
                    let mut y = match p.kind {
                        ParamKind::Conv { pad } => tensor::conv2d(&xq, &wq, 1, pad)?,
                        ParamKind::Linear => tensor::linear(&xq, &wq)?,
                    };
                    add_bias(&mut y, &p.bias);
                    (
                        y,
                        StepCache::Param {
                            input: cur,
                            xq,
                            wq,
                            act,
                            weight,
                        },
                    )
                }
                Layer::Relu => (cur.map(|v| if v < 0.0 { 0.0 } else { v }), StepCache::Relu { input: cur }),
                Layer::MaxPool2 => {
                    let (y, argmax) = max_pool2(&cur)?;
                    let in_shape = cur.shape().to_vec();
                    (y, StepCache::Pool { argmax, in_shape })
                }
                Layer::Flatten => {
                    let n = cur.shape()[0];
                    let y = cur.reshape(&[n, cur.len() / n.max(1)])?;
                    (y, StepCache::Flatten { in_shape: cur.shape().to_vec() })
                }
                Layer::Enhance(e) => {
                    let (y, c) = enhance::enhance_forward(&cur, e)?;
                    (y, StepCache::Enhance(c))
                }
            };
            steps.push(step);
            cur = next;
        }
        Ok((
            cur,
            ForwardCache {
                version: self.version,
                steps,
            },
        ))
    }

    /// Straight-through backward pass from `grad_logits`.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Tensor) -> Result<Gradients> {
        if cache.version != self.version || cache.steps.len() != self.layers.len() {
            return Err(MwqError::StaleCache {
                cache: cache.version,
                model: self.version,
            });
        }
        let mut grads = vec![LayerGrads::None; self.layers.len()];
        let mut g = grad_logits.clone();
        for (i, (layer, step)) in self.layers.iter().zip(&cache.steps).enumerate().rev() {
            g = match (layer, step) {
                (
                    Layer::Param(p),
                    StepCache::Param {
                        input,
                        xq,
                        wq,
                        act,
                        weight,
                    },
                ) => {
                    let (g_xq, g_wq) = match p.kind {
                        ParamKind::Conv { pad } => tensor::conv2d_backward(xq, wq, &g, 1, pad)?,
                        ParamKind::Linear => tensor::linear_backward(xq, wq, &g)?,
                    };
                    let bias = bias_grad(&g, p.bias.len());
                    let (weight_grad, weight_scales) = match weight {
                        WeightState::None => (g_wq, Vec::new()),
                        WeightState::Spatial(spec) => {
                            let (gw, gs) = quantizer::quantize_backward(&p.weight, &g_wq, spec)?;
                            (gw, vec![gs])
                        }
                        WeightState::Wavelet { cfg, specs } => {
                            let view = mwq::matrix_view_shape(p.weight.shape()).expect("2-D view");
                            let (gw, gs) = mwq::mwq_backward(
                                &p.weight.reshape(&view)?,
                                cfg,
                                specs,
                                &g_wq.reshape(&view)?,
                            )?;
                            (gw.reshape(p.weight.shape())?, gs)
                        }
                    };
                    let (g_in, act_scale) = match act {
                        Some(spec) => {
                            let (gx, gs) = quantizer::quantize_backward(input, &g_xq, spec)?;
                            (gx, Some(gs))
                        }
                        None => (g_xq, None),
                    };
                    grads[i] = LayerGrads::Param(ParamGrads {
                        weight: weight_grad,
                        bias,
                        weight_scales,
                        act_scale,
                    });
                    g_in
                }
                (Layer::Relu, StepCache::Relu { input }) => {
                    input.zip_map(&g, |x, u| if x > 0.0 { u } else { 0.0 })?
                }
                (Layer::MaxPool2, StepCache::Pool { argmax, in_shape }) => {
                    let mut out = Tensor::zeros(in_shape)?;
                    let d = out.data_mut();
                    for (&src, &u) in argmax.iter().zip(g.data()) {
                        d[src] += u;
                    }
                    out
                }
                (Layer::Flatten, StepCache::Flatten { in_shape }) => g.reshape(in_shape)?,
                (Layer::Enhance(_), StepCache::Enhance(c)) => {
                    let (gx, ga) = enhance::enhance_backward(c, &g)?;
                    grads[i] = LayerGrads::Alpha(ga);
                    gx
                }
                _ => {
                    return Err(MwqError::StaleCache {
                        cache: cache.version,
                        model: self.version,
                    })
                }
            };
        }
        Ok(Gradients { layers: grads, input: g })
    }

    /// Mutable parameter slices; matches the order of [`Gradients::slots`] once every scale is set.
    pub fn param_slots_mut(&mut self) -> Vec<(SlotKind, &mut [f32])> {
        self.version += 1;
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Param(p) => {
                    out.push((SlotKind::Weight, p.weight.data_mut()));
                    out.push((SlotKind::Bias, p.bias.data_mut()));
                    if !p.wq.scales.is_empty() {
                        out.push((SlotKind::Scale, p.wq.scales.as_mut_slice()));
                    }
                    if let Some(ActQuantizer { scale: Some(s), .. }) = &mut p.aq {
                        out.push((SlotKind::Scale, std::slice::from_mut(s)));
                    }
                }
                Layer::Enhance(e) => out.push((SlotKind::Alpha, std::slice::from_mut(&mut e.alpha))),
                _ => {}
            }
        }
        out
    }

    /// Name of the first layer whose parameters, or float-forward output on `x`, are non-finite.
    pub fn locate_non_finite(&self, x: &Tensor) -> String {
        for (name, layer) in self.layers() {
            let bad = match layer {
                Layer::Param(p) => {
                    p.weight.first_non_finite().is_some()
                        || p.bias.first_non_finite().is_some()
                        || p.wq.scales.iter().any(|s| !s.is_finite())
                }
                Layer::Enhance(e) => !e.alpha.is_finite(),
                _ => false,
            };
            if bad {
                return name.to_string();
            }
        }
        let mut cur = x.clone();
        for (name, layer) in self.layers() {
            match float_layer(layer, &cur) {
                Ok(y) if y.first_non_finite().is_none() => cur = y,
                _ => return name.to_string(),
            }
        }
        "loss".to_string()
    }

    /// Float forward pass without quantizers or input-shape checks.
    #[cfg(test)]
    fn run_unchecked(&self, x: &Tensor) -> Result<Tensor> {
        self.layers.iter().try_fold(x.clone(), |cur, layer| float_layer(layer, &cur))
    }

    /// Stores weights, biases, enhancement gains and learned scales under `<layer>.<field>`.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        let meta = [self.input[0], self.input[1], self.input[2], self.classes];
        ckpt.insert("meta.shape", Tensor::from_vec(&[4], meta.map(|v| v as f32).to_vec())?);
        for (name, layer) in self.layers() {
            match layer {
                Layer::Param(p) => {
                    ckpt.insert(format!("{name}.weight"), p.weight.clone());
                    ckpt.insert(format!("{name}.bias"), p.bias.clone());
                    if !p.wq.scales.is_empty() {
                        ckpt.insert(
                            format!("{name}.weight_scales"),
                            Tensor::from_vec(&[p.wq.scales.len()], p.wq.scales.clone())?,
                        );
                    }
                    if let Some(ActQuantizer { scale: Some(s), .. }) = &p.aq {
                        ckpt.insert(format!("{name}.act_scale"), Tensor::from_vec(&[1], vec![*s])?);
                    }
                }
                Layer::Enhance(e) => {
                    let cfg = vec![e.basis().tag() as f32, e.levels() as f32, e.alpha];
                    ckpt.insert(format!("{name}.config"), Tensor::from_vec(&[3], cfg)?);
                }
                _ => {}
            }
        }
        Ok(ckpt)
    }

    /// Rebuilds a float toy model from [`Model::to_checkpoint`] output.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = ckpt.require("meta.shape")?.data();
        if meta.len() != 4 {
            return Err(MwqError::format("checkpoint", "meta.shape must hold 4 values"));
        }
        let m = |i: usize| meta[i] as usize;
        let enhance = match ckpt.get("enhance1.config") {
            Some(t) if t.len() == 3 => {
                let d = t.data();
                let basis = WaveletName::from_tag(d[0] as u8)
                    .ok_or_else(|| MwqError::format("checkpoint", "unknown basis tag"))?;
                Some(EnhanceLayer::new(basis, d[1] as usize, d[2])?)
            }
            Some(_) => return Err(MwqError::format("checkpoint", "bad enhance1.config")),
            None => None,
        };
        let spec = ToySpec {
            input: [m(0), m(1), m(2)],
            classes: m(3),
            enhance,
        };
        let mut model = Model::toy(&spec, 0)?;
        for (name, layer) in model.names.iter().zip(&mut model.layers) {
            if let Layer::Param(p) = layer {
                for (field, slot) in [("weight", &mut p.weight), ("bias", &mut p.bias)] {
                    let t = ckpt.require(&format!("{name}.{field}"))?;
                    slot.expect_same_shape(t)?;
                    *slot = t.clone();
                }
            }
        }
        Ok(model)
    }
}
