//! SGD training, evaluation and the two-stage wavelet-then-spatial pipeline.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::Dataset;
use super::model::{ForwardMode, Gradients, Model, QuantScheme, SlotKind, WeightScheme, MIN_SCALE};
use crate::error::{MwqError, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(MwqError::ShapeMismatch {
            expected: vec![labels.len(), s.get(1).copied().unwrap_or(0)],
            actual: s.to_vec(),
        });
    }
    let (n, c) = (s[0], s[1]);
    let mut grad = Vec::with_capacity(n * c);
    let mut loss = 0.0f64;
    for (row, &label) in logits.data().chunks_exact(c).zip(labels) {
        if label >= c {
            return Err(MwqError::Data(format!("label {label} out of range for {c} classes")));
        }
        let max = row.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() - (row[label] as f64 - max);
        for (k, e) in exps.iter().enumerate() {
            let p = e / z - if k == label { 1.0 } else { 0.0 };
            grad.push((p / n as f64) as f32);
        }
    }
    Ok((loss / n as f64, Tensor::from_vec(s, grad)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Epochs (0-based) at whose start the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f32,
    pub seed: u64,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Stage label written to the metric log.
    pub stage: u8,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 0.01,
            decay_epochs: vec![6, 8],
            decay_factor: 0.1,
            seed: 0,
            momentum: 0.9,
            weight_decay: 1e-4,
            stage: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MwqError::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("learning rate must be finite and non-negative, got {}", self.lr));
        }
        if !self.decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return bad("decay epochs must be strictly increasing".into());
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return bad(format!("decay epochs must be below {}", self.epochs));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            return bad("decay factor must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("momentum must be in [0, 1) and weight decay non-negative".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        let decays = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.decay_factor.powi(decays as i32)
    }
}

/// SGD with momentum; weight decay applies to convolution and linear weights only.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients, lr: f32) -> Result<()> {
        let g = grads.slots();
        let mut params = model.param_slots_mut();
        if g.len() != params.len() || g.iter().zip(&params).any(|(a, b)| a.0 != b.0 || a.1.len() != b.1.len()) {
            return Err(MwqError::Config("gradients do not match the model parameters".into()));
        }
        let layout_changed = self.velocity.len() != params.len()
            || self.velocity.iter().zip(&params).any(|(v, p)| v.len() != p.1.len());
        if layout_changed {
            self.velocity = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        }
        for (((kind, p), (_, gs)), v) in params.iter_mut().zip(&g).zip(&mut self.velocity) {
            let decay = if *kind == SlotKind::Weight { self.weight_decay } else { 0.0 };
            for ((w, &gi), vi) in p.iter_mut().zip(gs.iter()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + decay * *w;
                *w -= lr * *vi;
            }
            if *kind == SlotKind::Scale {
                p.iter_mut().for_each(|s| *s = s.max(MIN_SCALE));
            }
        }
        Ok(())
    }
}

/// One row of the per-epoch metric log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub stage: u8,
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f64,
    /// Percent.
    pub test_acc: f64,
}

/// Top-1 accuracy in percent with rounding quantizers.
pub fn evaluate(model: &mut Model, data: &Dataset, batch_size: usize) -> Result<f64> {
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk);
        let (logits, _) = model.forward(&x, ForwardMode::Quantized)?;
        let c = logits.shape()[1];
        for (row, &label) in logits.data().chunks_exact(c).zip(&labels) {
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                .0;
            correct += (pred == label) as usize;
        }
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

/// Loss and gradients for one batch.
pub fn loss_and_grad(
    model: &mut Model,
    x: &Tensor,
    labels: &[usize],
    mode: ForwardMode,
) -> Result<(f64, Gradients)> {
    let (logits, cache) = model.forward(x, mode)?;
    let (loss, grad) = softmax_cross_entropy(&logits, labels)?;
    Ok((loss, model.backward(&cache, &grad)?))
}

/// Trains in place and returns one metric row per epoch.
///
/// Shuffling uses a ChaCha stream seeded by `cfg.seed`; batches accumulate in a fixed
/// order, so equal seeds give identical runs.
pub fn train(model: &mut Model, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<Vec<MetricRow>> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(MwqError::Data("training and test sets must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = train.batch(chunk);
            let result = loss_and_grad(model, &x, &labels, ForwardMode::Quantized);
            let (loss, grads) = match result {
                Ok((loss, grads)) if loss.is_finite() => (loss, grads),
                Ok(_) | Err(MwqError::NonFiniteInput { .. }) => {
                    return Err(MwqError::NonFiniteLoss {
                        step,
                        layer: model.locate_non_finite(&x),
                    })
                }
                Err(e) => return Err(e),
            };
            opt.step(model, &grads, lr)?;
            total += loss;
            batches += 1;
            step += 1;
        }
        log.push(MetricRow {
            stage: cfg.stage,
            epoch: epoch + 1,
            lr,
            train_loss: total / batches as f64,
            test_acc: evaluate(model, test, 256)?,
        });
    }
    Ok(log)
}

/// Result of [`two_stage_train`]; the model passed in holds the final spatial network.
#[derive(Debug, Clone)]
pub struct TwoStageReport {
    pub log: Vec<MetricRow>,
    /// The wavelet-quantized network at the end of the first stage.
    pub stage1: Model,
}

/// Trains with wavelet weight quantizers, then fine-tunes the same weights with spatial
/// quantizers of equal effective bit-width. The log concatenates both schedules.
pub fn two_stage_train(
    model: &mut Model,
    train_set: &Dataset,
    test_set: &Dataset,
    stage1: (&QuantScheme, &TrainConfig),
    stage2: (&QuantScheme, &TrainConfig),
) -> Result<TwoStageReport> {
    let (s1, c1) = stage1;
    let (s2, c2) = stage2;
    if !matches!(s1.weights, WeightScheme::Wavelet { .. }) {
        return Err(MwqError::Config("first stage must quantize weights in the wavelet domain".into()));
    }
    if !matches!(s2.weights, WeightScheme::Spatial { .. }) {
        return Err(MwqError::Config("second stage must quantize weights spatially".into()));
    }
    let (k1, k2) = (s1.weight_bits()?.unwrap(), s2.weight_bits()?.unwrap());
    if (k1 - k2).abs() > 1e-9 || s1.act_bits != s2.act_bits || s1.edge_bits != s2.edge_bits {
        return Err(MwqError::Config(format!(
            "stages must share the bit-width: {k1} / {:?} vs {k2} / {:?}",
            s1.act_bits, s2.act_bits
        )));
    }
    c1.validate()?;
    c2.validate()?;
    model.apply_scheme(s1)?;
    let mut log = train(model, train_set, test_set, &TrainConfig { stage: 1, ..c1.clone() })?;
    let snapshot = model.clone();
    model.apply_scheme(s2)?;
    log.extend(train(model, train_set, test_set, &TrainConfig { stage: 2, ..c2.clone() })?);
    Ok(TwoStageReport { log, stage1: snapshot })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::data::synthetic_shapes;
    use crate::nn::model::{Layer, ToySpec};
    use crate::quantizer::QuantMode;
    use crate::wavelet::WaveletName;

    fn toy() -> Model {
        Model::toy(
            &ToySpec {
                input: [1, 16, 16],
                classes: 3,
                enhance: None,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn cross_entropy_matches_hand_values() {
        let logits = Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 2.0, 0.0]).unwrap();
        let (loss, g) = softmax_cross_entropy(&logits, &[0, 1]).unwrap();
        let want = (2f64.ln() + (1.0 + 2f64.exp()).ln() - 0.0) / 2.0;
        assert!((loss - want).abs() < 1e-9);
        let p = 1.0 / (1.0 + (-2f64).exp());
        let expect = [-0.25, 0.25, p / 2.0, (1.0 - p - 1.0) / 2.0];
        for (a, b) in g.data().iter().zip(expect) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { decay_epochs: vec![5, 5], ..ok.clone() },
            TrainConfig { decay_epochs: vec![10], ..ok.clone() },
            TrainConfig { epochs: 0, ..ok.clone() },
            TrainConfig { momentum: 1.0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
        let cfg = TrainConfig { lr: 1.0, decay_epochs: vec![2, 4], decay_factor: 0.1, ..ok };
        assert_eq!([cfg.lr_at(1), cfg.lr_at(2), cfg.lr_at(5)], [1.0, 0.1, 0.1f32 * 0.1]);
    }

    #[test]
    fn a_small_enough_step_decreases_the_loss() {
        let data = synthetic_shapes(32, 1).unwrap();
        let (x, labels) = data.batch(&(0..32).collect::<Vec<_>>());
        let mut m = toy();
        let (before, grads) = loss_and_grad(&mut m, &x, &labels, ForwardMode::Quantized).unwrap();
        let mut lr = 0.1f32;
        let mut decreased = false;
        for _ in 0..20 {
            let mut trial = m.clone();
            Sgd::new(0.0, 0.0).step(&mut trial, &grads, lr).unwrap();
            let (after, _) = loss_and_grad(&mut trial, &x, &labels, ForwardMode::Quantized).unwrap();
            if after < before {
                decreased = true;
                break;
            }
            lr *= 0.5;
        }
        assert!(decreased);
    }

    #[test]
    fn equal_seeds_reproduce_the_log() {
        let (tr, te) = synthetic_shapes(96, 4).unwrap().split_tail(32).unwrap();
        let cfg = TrainConfig { epochs: 2, decay_epochs: vec![1], batch_size: 16, ..Default::default() };
        let run = || {
            let mut m = toy();
            m.apply_scheme(&QuantScheme::wavelet(WaveletName::Haar, 1, [4; 4], 4)).unwrap();
            (train(&mut m, &tr, &te, &cfg).unwrap(), m)
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn non_finite_loss_reports_step_and_layer() {
        let (tr, te) = synthetic_shapes(16, 5).unwrap().split_tail(4).unwrap();
        let mut m = toy();
        if let Some(Layer::Param(p)) = m.layer_mut("conv2") {
            p.weight.data_mut()[0] = f32::INFINITY;
        }
        let err = train(&mut m, &tr, &te, &TrainConfig { epochs: 1, decay_epochs: vec![], ..Default::default() })
            .unwrap_err();
        assert!(matches!(err, MwqError::NonFiniteLoss { step: 0, ref layer } if layer == "conv2"), "{err}");
    }

    #[test]
    fn two_stage_keeps_weights_across_the_switch() {
        let (tr, te) = synthetic_shapes(48, 6).unwrap().split_tail(16).unwrap();
        let cfg1 = TrainConfig { epochs: 1, decay_epochs: vec![], batch_size: 16, ..Default::default() };
        let frozen = TrainConfig { lr: 0.0, weight_decay: 0.0, ..cfg1.clone() };
        let s1 = QuantScheme::wavelet(WaveletName::Haar, 1, [3; 4], 3);
        let s2 = QuantScheme::spatial(3, QuantMode::Signed);
        let mut m = toy();
        let report = two_stage_train(&mut m, &tr, &te, (&s1, &cfg1), (&s2, &frozen)).unwrap();
        let weights = |m: &Model| -> Vec<Tensor> {
            m.layers()
                .filter_map(|(_, l)| match l {
                    Layer::Param(p) => Some(p.weight.clone()),
                    _ => None,
                })
                .collect()
        };
        assert_eq!(weights(&report.stage1), weights(&m));
        let stages: Vec<_> = report.log.iter().map(|r| (r.stage, r.lr)).collect();
        assert_eq!(stages, [(1, 0.01), (2, 0.0)]);

        let s2_bad = QuantScheme::spatial(4, QuantMode::Signed);
        assert!(matches!(
            two_stage_train(&mut toy(), &tr, &te, (&s1, &cfg1), (&s2_bad, &cfg1)),
            Err(MwqError::Config(_))
        ));
    }
}
