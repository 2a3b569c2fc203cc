use mwq_core::enhance::{self, EnhanceLayer};
use mwq_core::gradcheck::{self, CheckConfig, Probe};
use mwq_core::nn::model::{Layer, ParamLayer, QuantScheme, SlotKind, WeightScheme};
use mwq_core::nn::train::softmax_cross_entropy;
use mwq_core::nn::{ForwardMode, Model};
use mwq_core::quantizer::QuantMode;
use mwq_core::tensor::Tensor;
use mwq_core::wavelet::{self, Bands2d, WaveletBasis, WaveletName};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-3;
const FLOOR: f64 = 0.1;
/// One-sided slopes further apart than this mark a kink inside the stencil.
const KINK_TOL: f64 = 1e-3;

fn check(count: usize) -> CheckConfig {
    CheckConfig {
        eps: 1e-2,
        halvings: 2,
        kink_tol: KINK_TOL,
        floor: FLOOR,
        count,
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// conv(2 -> 4, 3x3) - ReLU - [enhance] - flatten - fc(256 -> 4) on 8x8 inputs.
fn two_layer(seed: u64, enhance: Option<EnhanceLayer>) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv = ParamLayer::conv(
        random(&[4, 2, 3, 3], &mut rng, -0.5, 0.5),
        random(&[4], &mut rng, -0.1, 0.1),
        1,
    )
    .unwrap();
    let fc = ParamLayer::linear(random(&[4, 256], &mut rng, -0.2, 0.2), random(&[4], &mut rng, -0.1, 0.1)).unwrap();
    let mut layers = vec![("conv".to_string(), Layer::Param(conv)), ("relu".to_string(), Layer::Relu)];
    if let Some(e) = enhance {
        layers.push(("enhance".to_string(), Layer::Enhance(e)));
    }
    layers.push(("flatten".to_string(), Layer::Flatten));
    layers.push(("fc".to_string(), Layer::Param(fc)));
    Model::new([2, 8, 8], 4, layers).unwrap()
}

/// Installs `scheme`, initializes scales on `x`, then tightens every scale so some values clip.
fn quantized(mut m: Model, scheme: &QuantScheme, x: &Tensor) -> Model {
    m.apply_scheme(scheme).unwrap();
    m.forward(x, ForwardMode::Surrogate).unwrap();
    for (kind, slot) in m.param_slots_mut() {
        if kind == SlotKind::Scale {
            slot.iter_mut().for_each(|s| *s *= 0.8);
        }
    }
    m
}

fn assert_probes(label: &str, probes: &[(SlotKind, Probe)], min_smooth: usize) {
    let smooth = |kind: Option<SlotKind>| -> Vec<&Probe> {
        probes
            .iter()
            .filter(|(k, p)| kind.is_none_or(|want| *k == want) && p.is_smooth(KINK_TOL, FLOOR))
            .map(|(_, p)| p)
            .collect()
    };
    let all = smooth(None);
    assert!(all.len() >= min_smooth, "{label}: only {} smooth probes", all.len());
    let live = all.iter().filter(|p| p.analytic.abs() > 1e-3).count();
    assert!(2 * live >= min_smooth, "{label}: only {live} non-zero gradients probed");
    if probes.iter().any(|(k, _)| *k == SlotKind::Scale) {
        assert!(!smooth(Some(SlotKind::Scale)).is_empty(), "{label}: no scale probe verified");
    }
    for p in all {
        assert!(p.rel_error(FLOOR) <= TOL, "{label}: {p:?} rel {}", p.rel_error(FLOOR));
    }
}

fn setup(seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (random(&[3, 2, 8, 8], &mut rng, 0.0, 1.0), random(&[3, 4], &mut rng, -1.0, 1.0))
}

#[test]
fn full_precision_toy_net() {
    let (x, r) = setup(1);
    let m = two_layer(2, None);
    let probes = gradcheck::check_model(&m, &x, &r, ForwardMode::Quantized, &check(40)).unwrap();
    assert_probes("fp", &probes, 10);
}

#[test]
fn wavelet_surrogate_toy_net() {
    let (x, r) = setup(3);
    for basis in [WaveletName::Haar, WaveletName::Db2] {
        let scheme = QuantScheme {
            weights: WeightScheme::Wavelet { basis, levels: 1, bits: [4; 4] },
            act_bits: Some(4),
            edge_bits: None,
        };
        let m = quantized(two_layer(4, None), &scheme, &x);
        let probes = gradcheck::check_model(&m, &x, &r, ForwardMode::Surrogate, &check(80)).unwrap();
        assert_probes(basis.as_str(), &probes, 10);
    }
}

#[test]
fn wavelet_surrogate_two_levels() {
    let (x, r) = setup(5);
    let scheme = QuantScheme {
        weights: WeightScheme::Wavelet { basis: WaveletName::Haar, levels: 2, bits: [4, 3, 3, 2] },
        act_bits: Some(4),
        edge_bits: None,
    };
    let m = quantized(two_layer(6, None), &scheme, &x);
    let probes = gradcheck::check_model(&m, &x, &r, ForwardMode::Surrogate, &check(80)).unwrap();
    assert_probes("haar J=2", &probes, 10);
}

#[test]
fn spatial_surrogate_toy_net() {
    let (x, r) = setup(7);
    for mode in [QuantMode::Signed, QuantMode::Apot] {
        let scheme = QuantScheme {
            weights: WeightScheme::Spatial { bits: 4, mode },
            act_bits: Some(4),
            edge_bits: None,
        };
        let m = quantized(two_layer(8, None), &scheme, &x);
        let probes = gradcheck::check_model(&m, &x, &r, ForwardMode::Surrogate, &check(80)).unwrap();
        assert_probes(&format!("{mode}"), &probes, 10);
    }
}

#[test]
fn enhanced_toy_net_including_alpha() {
    let (x, r) = setup(9);
    let e = EnhanceLayer::new(WaveletName::Haar, 1, 1.2).unwrap();
    let m = two_layer(10, Some(e));
    let probes = gradcheck::check_model(&m, &x, &r, ForwardMode::Quantized, &check(40)).unwrap();
    assert_probes("enhance", &probes, 10);

    // The alpha slot is the third of five: conv weight, conv bias, alpha, fc weight, fc bias.
    let mut base = m.clone();
    let (_, cache) = base.forward(&x, ForwardMode::Quantized).unwrap();
    let ga = base.backward(&cache, &r).unwrap().slots()[2].1[0] as f64;
    let eval = |a: f32| {
        let mut mm = m.clone();
        mm.param_slots_mut()[2].1[0] = a;
        let (y, _) = mm.forward(&x, ForwardMode::Quantized)?;
        gradcheck::readout_loss(&y, &r)
    };
    let p = gradcheck::probe(eval, 1.2, 1e-2, ga).unwrap();
    assert!(p.rel_error(FLOOR) <= TOL, "{p:?}");
}

#[test]
fn standalone_transform_nodes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for name in WaveletName::ALL {
        let basis = WaveletBasis::new(name);
        let x = random(&[16, 16], &mut rng, -1.0, 1.0);
        let rb = Bands2d {
            ll: random(&[8, 8], &mut rng, -1.0, 1.0),
            lh: random(&[8, 8], &mut rng, -1.0, 1.0),
            hl: random(&[8, 8], &mut rng, -1.0, 1.0),
            hh: random(&[8, 8], &mut rng, -1.0, 1.0),
        };
        let bands_dot = |b: &Bands2d| -> f64 {
            [(&b.ll, &rb.ll), (&b.lh, &rb.lh), (&b.hl, &rb.hl), (&b.hh, &rb.hh)]
                .iter()
                .map(|(a, r)| a.dot(r).unwrap())
                .sum()
        };
        // d<r, dwt2d(x)>/dx = dwt2d_adjoint(r)
        let grad = wavelet::dwt2d_adjoint(&rb, &basis).unwrap();
        for k in [0, 17, 100, 255] {
            let eval = |v: f32| {
                let mut xx = x.clone();
                xx.data_mut()[k] = v;
                Ok(bands_dot(&wavelet::dwt2d(&xx, &basis)?))
            };
            let p = gradcheck::probe(eval, x.data()[k], 1e-2, grad.data()[k] as f64).unwrap();
            assert!(p.rel_error(FLOOR) <= TOL, "{name} dwt2d {k}: {p:?}");
        }
        // d<r, idwt2d(b)>/db = idwt2d_adjoint(r)
        let ry = random(&[16, 16], &mut rng, -1.0, 1.0);
        let g = wavelet::idwt2d_adjoint(&ry, &basis).unwrap();
        for k in [0, 9, 63] {
            let eval = |v: f32| {
                let mut b = rb.clone();
                b.hl.data_mut()[k] = v;
                wavelet::idwt2d(&b, &basis)?.dot(&ry)
            };
            let p = gradcheck::probe(eval, rb.hl.data()[k], 1e-2, g.hl.data()[k] as f64).unwrap();
            assert!(p.rel_error(FLOOR) <= TOL, "{name} idwt2d {k}: {p:?}");
        }
        // Enhancement input gradient.
        let layer = EnhanceLayer::new(name, 1, 1.3).unwrap();
        let (_, cache) = enhance::enhance_forward(&x, &layer).unwrap();
        let (gx, _) = enhance::enhance_backward(&cache, &ry).unwrap();
        for k in [3, 128] {
            let eval = |v: f32| {
                let mut xx = x.clone();
                xx.data_mut()[k] = v;
                enhance::enhance(&xx, &layer)?.dot(&ry)
            };
            let p = gradcheck::probe(eval, x.data()[k], 1e-2, gx.data()[k] as f64).unwrap();
            assert!(p.rel_error(FLOOR) <= TOL, "{name} enhance {k}: {p:?}");
        }
    }
}

#[test]
fn cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let logits = random(&[4, 3], &mut rng, -2.0, 2.0);
    let labels = [0, 2, 1, 1];
    let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
    for k in 0..12 {
        let eval = |v: f32| {
            let mut l = logits.clone();
            l.data_mut()[k] = v;
            Ok(softmax_cross_entropy(&l, &labels)?.0)
        };
        let p = gradcheck::probe(eval, logits.data()[k], 1e-3, g.data()[k] as f64).unwrap();
        assert!(p.rel_error(1e-3) <= TOL, "{k}: {p:?}");
    }
}
