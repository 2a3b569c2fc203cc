//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits non-zero on any failure.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use mwq_core::compress::{self, LayerPayload, QuantizedPackage};
use mwq_core::enhance::{self, EnhanceLayer};
use mwq_core::gradcheck::{self, CheckConfig, Probe};
use mwq_core::mwq::{self, MwqConfig};
use mwq_core::nn::model::{Layer, ParamLayer, QuantScheme, SlotKind, ToySpec};
use mwq_core::nn::train::{self, TrainConfig};
use mwq_core::nn::{synthetic_shapes, Dataset, ForwardMode, Model};
use mwq_core::quantizer::{self, QuantMode, QuantizerSpec};
use mwq_core::wavelet::{self, Bands2d, WaveletBasis, WaveletName};
use mwq_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn perfect_reconstruction() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0f32;
    for name in WaveletName::ALL {
        let basis = WaveletBasis::new(name);
        for levels in [1, 2] {
            for _ in 0..100 {
                let x = uniform(&[16, 16], &mut rng, -1.0, 1.0);
                let y = wavelet::waverec2(&wavelet::wavedec2(&x, &basis, levels).unwrap()).unwrap();
                worst = worst.max(max_diff(&x, &y));
            }
        }
    }
    ensure(worst <= 1e-5, || format!("max error {worst:e}"))?;
    Ok(format!("800 round trips, max error {worst:.2e}"))
}

fn nominal_ratios() -> Verdict {
    let table: [([u32; 4], &str); 7] = [
        ([2, 2, 2, 2], "16.00"),
        ([3, 2, 2, 1], "16.00"),
        ([4, 2, 1, 1], "16.00"),
        ([5, 1, 1, 1], "16.00"),
        ([3, 3, 3, 3], "10.67"),
        ([6, 2, 2, 2], "10.67"),
        ([4, 4, 4, 4], "8.00"),
    ];
    for (bits, want) in table {
        let cfg = MwqConfig::new(WaveletName::Haar, 1, bits).map_err(|e| e.to_string())?;
        let got = format!("{:.2}", compress::nominal_compression_ratio(&cfg));
        ensure(got == want, || format!("{bits:?}: {got} != {want}"))?;
    }
    Ok("7/7 configurations".into())
}

fn representation_states() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = MwqConfig::new(WaveletName::Haar, 1, [4; 4]).unwrap();
    let (mut wins, mut max_spatial) = (0, 0);
    for _ in 0..100 {
        let w = gaussian(&[8, 8], &mut rng);
        let m = mwq::count_representation_states(&mwq::mwq_quantize(&w, &cfg).unwrap().xq, 1e-9);
        let spec = QuantizerSpec::signed(4, quantizer::init_scale(&w)).unwrap();
        let s = mwq::count_representation_states(&quantizer::quantize(&w, &spec).unwrap(), 1e-9);
        wins += (m > s) as usize;
        max_spatial = max_spatial.max(s);
    }
    ensure(wins >= 95 && max_spatial <= 15, || format!("{wins}/100 wins, spatial max {max_spatial}"))?;
    Ok(format!("{wins}/100 wins, spatial max {max_spatial}"))
}

const TOL: f64 = 1e-3;
const FLOOR: f64 = 0.1;
const KINK_TOL: f64 = 1e-3;

fn two_layer(seed: u64, enhance: Option<EnhanceLayer>) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv = ParamLayer::conv(
        uniform(&[4, 2, 3, 3], &mut rng, -0.5, 0.5),
        uniform(&[4], &mut rng, -0.1, 0.1),
        1,
    )
    .unwrap();
    let fc = ParamLayer::linear(uniform(&[4, 256], &mut rng, -0.2, 0.2), uniform(&[4], &mut rng, -0.1, 0.1))
        .unwrap();
    let mut layers = vec![("conv".to_string(), Layer::Param(conv)), ("relu".to_string(), Layer::Relu)];
    if let Some(e) = enhance {
        layers.push(("enhance".to_string(), Layer::Enhance(e)));
    }
    layers.push(("flatten".to_string(), Layer::Flatten));
    layers.push(("fc".to_string(), Layer::Param(fc)));
    Model::new([2, 8, 8], 4, layers).unwrap()
}

fn verify(label: &str, probes: &[(SlotKind, Probe)], worst: &mut f64, checked: &mut usize) -> Result<(), String> {
    let smooth: Vec<&(SlotKind, Probe)> = probes.iter().filter(|(_, p)| p.is_smooth(KINK_TOL, FLOOR)).collect();
    ensure(smooth.len() >= 10, || format!("{label}: only {} smooth probes", smooth.len()))?;
    if probes.iter().any(|(k, _)| *k == SlotKind::Scale) {
        ensure(smooth.iter().any(|(k, _)| *k == SlotKind::Scale), || format!("{label}: no scale probe"))?;
    }
    for (kind, p) in smooth {
        let rel = p.rel_error(FLOOR);
        *worst = worst.max(rel);
        *checked += 1;
        ensure(rel <= TOL, || format!("{label} {kind:?}: {p:?} rel {rel:e}"))?;
    }
    Ok(())
}

fn node_probe(label: &str, p: Probe, worst: &mut f64, checked: &mut usize) -> Result<(), String> {
    let rel = p.rel_error(FLOOR);
    *worst = worst.max(rel);
    *checked += 1;
    ensure(rel <= TOL, || format!("{label}: {p:?} rel {rel:e}"))
}

fn gradient_suite() -> Verdict {
    let cfg = CheckConfig { eps: 1e-2, halvings: 2, kink_tol: KINK_TOL, floor: FLOOR, count: 80 };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = uniform(&[3, 2, 8, 8], &mut rng, 0.0, 1.0);
    let r = uniform(&[3, 4], &mut rng, -1.0, 1.0);
    let (mut worst, mut checked) = (0f64, 0usize);

    let schemes = [
        ("fp", QuantScheme::full_precision()),
        ("mwq haar", QuantScheme::wavelet(WaveletName::Haar, 1, [4; 4], 4)),
        ("mwq db2", QuantScheme::wavelet(WaveletName::Db2, 1, [4; 4], 4)),
        ("mwq haar J=2", QuantScheme::wavelet(WaveletName::Haar, 2, [4, 3, 3, 2], 4)),
        ("spatial", QuantScheme::spatial(4, QuantMode::Signed)),
    ];
    for (label, scheme) in schemes {
        let mut m = two_layer(5, None);
        m.apply_scheme(&QuantScheme { edge_bits: None, ..scheme }).map_err(|e| e.to_string())?;
        m.forward(&x, ForwardMode::Surrogate).unwrap();
        for (kind, slot) in m.param_slots_mut() {
            if kind == SlotKind::Scale {
                slot.iter_mut().for_each(|s| *s *= 0.8);
            }
        }
        let probes = gradcheck::check_model(&m, &x, &r, ForwardMode::Surrogate, &cfg).map_err(|e| e.to_string())?;
        verify(label, &probes, &mut worst, &mut checked)?;
    }
    let m = two_layer(6, Some(EnhanceLayer::new(WaveletName::Haar, 1, 1.2).unwrap()));
    let probes = gradcheck::check_model(&m, &x, &r, ForwardMode::Quantized, &cfg).map_err(|e| e.to_string())?;
    ensure(probes.iter().any(|(k, p)| *k == SlotKind::Alpha && p.is_smooth(KINK_TOL, FLOOR)), || {
        "enhance: alpha not probed".into()
    })?;
    verify("enhance net", &probes, &mut worst, &mut checked)?;

    for name in WaveletName::ALL {
        let basis = WaveletBasis::new(name);
        let x = uniform(&[16, 16], &mut rng, -1.0, 1.0);
        let rb = Bands2d {
            ll: uniform(&[8, 8], &mut rng, -1.0, 1.0),
            lh: uniform(&[8, 8], &mut rng, -1.0, 1.0),
            hl: uniform(&[8, 8], &mut rng, -1.0, 1.0),
            hh: uniform(&[8, 8], &mut rng, -1.0, 1.0),
        };
        let ry = uniform(&[16, 16], &mut rng, -1.0, 1.0);
        let gx = wavelet::dwt2d_adjoint(&rb, &basis).unwrap();
        let gb = wavelet::idwt2d_adjoint(&ry, &basis).unwrap();
        let layer = EnhanceLayer::new(name, 1, 1.3).unwrap();
        let (_, cache) = enhance::enhance_forward(&x, &layer).unwrap();
        let (ge, galpha) = enhance::enhance_backward(&cache, &ry).unwrap();
        for k in [0, 37, 128, 255] {
            let dwt = |v: f32| {
                let mut xx = x.clone();
                xx.data_mut()[k] = v;
                let b = wavelet::dwt2d(&xx, &basis)?;
                Ok(b.ll.dot(&rb.ll)? + b.lh.dot(&rb.lh)? + b.hl.dot(&rb.hl)? + b.hh.dot(&rb.hh)?)
            };
            let p = gradcheck::probe(dwt, x.data()[k], 1e-2, gx.data()[k] as f64).unwrap();
            node_probe(&format!("{name} dwt2d"), p, &mut worst, &mut checked)?;
            let enh = |v: f32| {
                let mut xx = x.clone();
                xx.data_mut()[k] = v;
                enhance::enhance(&xx, &layer)?.dot(&ry)
            };
            let p = gradcheck::probe(enh, x.data()[k], 1e-2, ge.data()[k] as f64).unwrap();
            node_probe(&format!("{name} enhance"), p, &mut worst, &mut checked)?;
        }
        for k in [0, 9, 63] {
            let idwt = |v: f32| {
                let mut b = rb.clone();
                b.lh.data_mut()[k] = v;
                wavelet::idwt2d(&b, &basis)?.dot(&ry)
            };
            let p = gradcheck::probe(idwt, rb.lh.data()[k], 1e-2, gb.lh.data()[k] as f64).unwrap();
            node_probe(&format!("{name} idwt2d"), p, &mut worst, &mut checked)?;
        }
        let alpha = |a: f32| enhance::enhance(&x, &EnhanceLayer::new(name, 1, a)?)?.dot(&ry);
        let p = gradcheck::probe(alpha, 1.3, 1e-2, galpha as f64).unwrap();
        node_probe(&format!("{name} enhance alpha"), p, &mut worst, &mut checked)?;
    }
    Ok(format!("{checked} probes, max rel error {worst:.2e}"))
}

fn oracle_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..50 {
        let name = WaveletName::ALL[i % 4];
        let bits = [[4, 4, 4, 4], [5, 3, 3, 2], [2, 2, 2, 2]][i % 3];
        let x = gaussian(&[16, 24], &mut rng);
        let got = mwq::mwq_quantize(&x, &MwqConfig::new(name, 1, bits).unwrap()).unwrap().xq;

        let basis = WaveletBasis::new(name);
        let b = wavelet::dwt2d(&x, &basis).unwrap();
        let q = |band: &Tensor, m: u32| -> Tensor {
            let s = band.max_abs();
            let levels = ((1u32 << (m - 1)) - 1) as f32;
            let d = s / levels;
            band.map(|v| ((v / s).clamp(-1.0, 1.0) * levels).round() * d)
        };
        let want = wavelet::idwt2d(
            &Bands2d { ll: q(&b.ll, bits[0]), lh: q(&b.lh, bits[1]), hl: q(&b.hl, bits[2]), hh: q(&b.hh, bits[3]) },
            &basis,
        )
        .unwrap();
        ensure(bits_equal(&got, &want), || format!("input {i} ({name}, {bits:?}) differs"))?;
    }
    Ok("50/50 bitwise equal".into())
}

fn package_round_trip() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = MwqConfig::new(WaveletName::Haar, 1, [4; 4]).unwrap();
    let w = gaussian(&[256, 256], &mut rng).scale(0.05);
    let (record, out) = compress::pack_tensor("fc.weight", &w, &cfg).map_err(|e| e.to_string())?;
    let out = out.ok_or("layer was stored raw")?;
    let pkg = QuantizedPackage { layers: vec![record] };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.mwq");
    pkg.write_to(&path).unwrap();
    let back = QuantizedPackage::read_from(&path).map_err(|e| e.to_string())?;
    ensure(back == pkg, || "package changed on disk".into())?;

    let LayerPayload::Wavelet { bands, .. } = &back.layers[0].payload else {
        return Err("restored layer is raw".into());
    };
    let coeffs = wavelet::wavedec2(&w, &WaveletBasis::new(WaveletName::Haar), 1).unwrap();
    for ((band, spec), (id, c)) in bands.iter().zip(&out.specs).zip(coeffs.bands()) {
        let want: Vec<i32> = c.data().iter().map(|&v| spec.code(v) as i32).collect();
        ensure(band.codes == want, || format!("{id} codes differ"))?;
    }
    let restored = back.layers[0].restore().unwrap();
    ensure(bits_equal(&restored, &out.xq), || "restored weights differ from quantized".into())?;
    let ratio = compress::effective_compression_ratio(&back, back.original_bytes()).unwrap();
    ensure((ratio - 8.0).abs() <= 0.16, || format!("effective ratio {ratio:.3}"))?;
    Ok(format!("codes bitwise equal, effective ratio {ratio:.3}"))
}

struct Arm {
    fp: f64,
    mwq4: f64,
    sp4: f64,
    direct3: f64,
    two_stage3: f64,
}

fn final_acc(log: &[train::MetricRow]) -> f64 {
    log.last().unwrap().test_acc
}

fn run_seed(seed: u64) -> mwq_core::Result<Arm> {
    let (train_set, test_set): (Dataset, Dataset) = synthetic_shapes(2100, 11 + seed)?.split_tail(600)?;
    let spec = ToySpec { input: [1, 16, 16], classes: 3, enhance: None };
    let base = TrainConfig { seed, ..TrainConfig::default() };
    let mut fp = Model::toy(&spec, seed)?;
    let fp_acc = final_acc(&train::train(&mut fp, &train_set, &test_set, &base)?);

    let finetune = |scheme: &QuantScheme, cfg: &TrainConfig| -> mwq_core::Result<f64> {
        let mut m = fp.clone();
        m.apply_scheme(scheme)?;
        Ok(final_acc(&train::train(&mut m, &train_set, &test_set, cfg)?))
    };
    let mwq4 = finetune(&QuantScheme::wavelet(WaveletName::Haar, 1, [4; 4], 4), &base)?;
    let sp4 = finetune(&QuantScheme::spatial(4, QuantMode::Signed), &base)?;
    let long = TrainConfig { epochs: 15, decay_epochs: vec![9, 12], ..base.clone() };
    let direct3 = finetune(&QuantScheme::spatial(3, QuantMode::Signed), &long)?;

    let mut m = fp.clone();
    let stage2 = TrainConfig { epochs: 5, lr: 1e-3, decay_epochs: vec![3], stage: 2, ..base.clone() };
    let report = train::two_stage_train(
        &mut m,
        &train_set,
        &test_set,
        (&QuantScheme::wavelet(WaveletName::Haar, 1, [3; 4], 3), &base),
        (&QuantScheme::spatial(3, QuantMode::Signed), &stage2),
    )?;
    Ok(Arm { fp: fp_acc, mwq4, sp4, direct3, two_stage3: final_acc(&report.log) })
}

fn desk_training() -> Verdict {
    let arms: Vec<Arm> = (0..3).map(run_seed).collect::<mwq_core::Result<_>>().map_err(|e| e.to_string())?;
    let mean = |f: fn(&Arm) -> f64| arms.iter().map(f).sum::<f64>() / arms.len() as f64;
    let (fp, mwq4, sp4) = (mean(|a| a.fp), mean(|a| a.mwq4), mean(|a| a.sp4));
    let (d3, t3) = (mean(|a| a.direct3), mean(|a| a.two_stage3));
    let summary = format!("fp {fp:.2} | mwq4 {mwq4:.2} vs sp4 {sp4:.2} | two-stage3 {t3:.2} vs direct3 {d3:.2}");
    ensure(fp >= 97.0 && mwq4 >= sp4 - 0.5 && t3 >= d3 - 0.5, || summary.clone())?;
    Ok(summary)
}

fn enhancement_identity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0f32;
    for name in WaveletName::ALL {
        for levels in [1, 2] {
            let x = uniform(&[2, 16, 16], &mut rng, -1.0, 1.0);
            let y = enhance::enhance(&x, &EnhanceLayer::new(name, levels, 1.0).unwrap()).unwrap();
            worst = worst.max(max_diff(&x, &y));
            let zero = enhance::enhance(&x, &EnhanceLayer::new(name, levels, 0.0).unwrap()).unwrap();
            let mut sb = wavelet::wavedec2(&x, &WaveletBasis::new(name), levels).unwrap();
            sb.highs.iter_mut().for_each(|h| h.data = h.data.zeros_like());
            let want = wavelet::waverec2(&sb).unwrap();
            ensure(max_diff(&zero, &want) <= 1e-6, || format!("{name} J={levels}: alpha=0 differs"))?;
        }
    }
    ensure(worst <= 1e-5, || format!("alpha=1 error {worst:e}"))?;
    Ok(format!("alpha=1 max error {worst:.2e}, alpha=0 matches oracle"))
}

fn mwq(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mwq"))
        .current_dir(dir)
        .env("MWQ_THREADS", "1")
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("mwq {args:?}: {}", String::from_utf8_lossy(&out.stderr)))
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for entry in walk(dir) {
        files.push((entry.strip_prefix(dir).unwrap().display().to_string(), fs::read(&entry).unwrap()));
    }
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn write_test_image(dir: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut bytes = b"P5\n32 32\n255\n".to_vec();
    bytes.extend((0..32 * 32).map(|_| rng.gen::<u8>()));
    fs::write(dir.join("in.pgm"), bytes).unwrap();
}

fn cli_session(dir: &Path) -> Result<(), String> {
    write_test_image(dir);
    let small = ["--train-size", "200", "--test-size", "60", "--epochs", "2", "--seed", "5"];
    mwq(dir, &["dwt", "in.pgm", "bands", "--basis", "db2", "--levels", "2"])?;
    mwq(dir, &["analyze-states", "--seed", "5", "--out", "states.csv"])?;
    mwq(dir, &["enhance", "in.pgm", "enh.pgm", "--alpha", "1.5"])?;
    mwq(dir, &[&["train", "--log", "s1.csv", "--ckpt-out", "s1.ckpt"][..], &small].concat())?;
    mwq(dir, &[&["train", "--stage", "2", "--ckpt-in", "s1.ckpt", "--log", "s2.csv", "--ckpt-out", "s2.ckpt"][..], &small].concat())?;
    mwq(dir, &[&["train", "--stage", "both", "--wbits", "3", "--log", "both.csv"][..], &small].concat())?;
    mwq(dir, &["compress", "--model", "s2.ckpt", "--out", "s2.mwq"])?;
    mwq(dir, &["decompress", "--in", "s2.mwq", "--out", "restored.ckpt"])
}

fn cli_determinism() -> Verdict {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cli_session(a.path())?;
    cli_session(b.path())?;
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    ensure(sa.len() == sb.len(), || "different file sets".into())?;
    for ((na, da), (nb, db)) in sa.iter().zip(&sb) {
        ensure(na == nb && da == db, || format!("{na} differs between runs"))?;
    }
    Ok(format!("{} files byte-identical across two sessions", sa.len()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 perfect reconstruction", perfect_reconstruction),
        ("2 nominal compression ratios", nominal_ratios),
        ("3 representation states", representation_states),
        ("4 gradient suite", gradient_suite),
        ("5 oracle equivalence", oracle_equivalence),
        ("6 package round trip", package_round_trip),
        ("7 desk-scale training", desk_training),
        ("8 enhancement identity", enhancement_identity),
        ("9 cli determinism", cli_determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let t = Instant::now();
        let verdict = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
