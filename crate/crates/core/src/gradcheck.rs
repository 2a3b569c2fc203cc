//! Central finite-difference gradient checks.

use crate::error::Result;
use crate::nn::model::{ForwardMode, Model, SlotKind};
use crate::tensor::Tensor;

/// Comparison of an analytic derivative with finite differences at one coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub analytic: f64,
    pub left: f64,
    pub right: f64,
}

impl Probe {
    pub fn central(&self) -> f64 {
        0.5 * (self.left + self.right)
    }

    /// `|analytic - central| / max(|analytic|, |central|, floor)`.
    pub fn rel_error(&self, floor: f64) -> f64 {
        let c = self.central();
        (self.analytic - c).abs() / self.analytic.abs().max(c.abs()).max(floor)
    }

    /// False when the one-sided slopes disagree, i.e. a kink lies inside the stencil.
    pub fn is_smooth(&self, tol: f64, floor: f64) -> bool {
        (self.left - self.right).abs() <= tol * self.left.abs().max(self.right.abs()).max(floor)
    }
}

/// Evaluates `f` at `x0 - eps`, `x0`, `x0 + eps` (as rounded to f32) and forms one-sided slopes.
pub fn probe(mut f: impl FnMut(f32) -> Result<f64>, x0: f32, eps: f32, analytic: f64) -> Result<Probe> {
    let (lo, hi) = (x0 - eps, x0 + eps);
    let (fl, f0, fh) = (f(lo)?, f(x0)?, f(hi)?);
    Ok(Probe {
        analytic,
        left: (f0 - fl) / (x0 as f64 - lo as f64),
        right: (fh - f0) / (hi as f64 - x0 as f64),
    })
}

/// `sum(readout * logits)` in f64; its logit gradient is `readout`.
pub fn readout_loss(logits: &Tensor, readout: &Tensor) -> Result<f64> {
    logits.dot(readout)
}

/// Settings for [`check_model`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckConfig {
    /// Largest half-width of the stencil.
    pub eps: f32,
    /// How many times the stencil may be halved to step past a kink.
    pub halvings: u32,
    pub kink_tol: f64,
    pub floor: f64,
    pub count: usize,
}

/// Probes up to `count` distinct parameters, cycling through every parameter slot of `model`.
///
/// The loss is [`readout_loss`] of the forward pass in `mode`; analytic values come from
/// [`Model::backward`]. Each probe uses the widest stencil whose one-sided slopes agree,
/// falling back to the narrowest one. Scales must already be initialized.
pub fn check_model(
    model: &Model,
    x: &Tensor,
    readout: &Tensor,
    mode: ForwardMode,
    cfg: &CheckConfig,
) -> Result<Vec<(SlotKind, Probe)>> {
    let mut base = model.clone();
    let (_, cache) = base.forward(x, mode)?;
    let grads = base.backward(&cache, readout)?;
    let slots: Vec<(SlotKind, Vec<f32>)> = grads.slots().iter().map(|(k, s)| (*k, s.to_vec())).collect();
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(cfg.count);
    for k in 0..cfg.count {
        // Round-robin over slots so every scale and bias is covered; fixed stride inside a slot.
        let slot = k % slots.len();
        let flat = (k / slots.len() * 7919 + 13 * k) % slots[slot].1.len();
        if !seen.insert((slot, flat)) {
            continue;
        }
        let x0 = base.param_slots_mut()[slot].1[flat];
        let eval = |v: f32| -> Result<f64> {
            let mut m = base.clone();
            m.param_slots_mut()[slot].1[flat] = v;
            let (logits, _) = m.forward(x, mode)?;
            readout_loss(&logits, readout)
        };
        let analytic = slots[slot].1[flat] as f64;
        let mut eps = cfg.eps;
        let mut p = probe(eval, x0, eps, analytic)?;
        for _ in 0..cfg.halvings {
            if p.is_smooth(cfg.kink_tol, cfg.floor) {
                break;
            }
            eps *= 0.5;
            p = probe(eval, x0, eps, analytic)?;
        }
        out.push((slots[slot].0, p));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_of_a_smooth_function() {
        let p = probe(|v| Ok((v as f64).powi(2)), 1.5, 1e-3, 3.0).unwrap();
        assert!(p.rel_error(1e-6) < 1e-4);
        assert!(p.is_smooth(1e-2, 1e-6));
    }

    #[test]
    fn probe_detects_kinks() {
        let p = probe(|v| Ok((v as f64).abs()), 0.0, 1e-2, 0.0).unwrap();
        assert!(!p.is_smooth(1e-2, 1e-6));
    }
}
