//! The toy encoder: float reference against a naive oracle, the quantized
//! building blocks against hand-composed traces, and calibration-level
//! properties.

use intq::calibrate::{evaluate, relative_l2, run_calibration, CalibrationConfig};
use intq::data::{generate, SyntheticKind, SyntheticSpec};
use intq::model::{
    encoder_block_forward, msa_forward, quantized_linear, quantized_qk_matmul, AttentionMode,
    BitTriple, Encoder, EncoderPlan, FloatEncoder, NoSink, QuantizedEncoderModel, Site, SiteKind,
};
use intq::ptf::{dequantize_ptf, float_layernorm, LayerNormAffine};
use intq::quant::{dequantize_uniform, quantize_uniform, quantize_weights_per_channel, QuantParams};
use intq::{FloatTensor, IntTensor, Signedness};
use num_bigint::BigInt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

mod common;
use common::{arch, calibrate, gaussian, ln1_codes};

fn random_floats(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, sd).unwrap();
    (0..n).map(|_| normal.sample(rng)).collect()
}

// ------------------------------------------------------- float reference

fn naive_layernorm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let c = x.len() as f64;
    let mean = x.iter().sum::<f64>() / c;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
    x.iter().enumerate().map(|(i, v)| (v - mean) / (var + eps).sqrt() * gamma[i] + beta[i]).collect()
}

fn naive_linear(x: &[Vec<f64>], w: &FloatTensor, b: &[f64]) -> Vec<Vec<f64>> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| (0..out).map(|o| (0..inp).map(|i| row[i] * w.data()[o * inp + i]).sum::<f64>() + b[o]).collect())
        .collect()
}

fn naive_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Textbook pre-norm encoder over nested vectors.
fn naive_forward(m: &FloatEncoder, x: &FloatTensor) -> Vec<Vec<f64>> {
    let ln = |rows: &[Vec<f64>], a: &LayerNormAffine| -> Vec<Vec<f64>> {
        rows.iter().map(|r| naive_layernorm(r, &a.gamma, &a.beta, a.epsilon)).collect()
    };
    let (h, d) = (m.arch.num_heads, m.arch.head_dim());
    let mut x: Vec<Vec<f64>> = x.rows().map(<[f64]>::to_vec).collect();
    let l = x.len();
    for b in &m.blocks {
        let n = ln(&x, &b.ln1);
        let (q, k, v) = (naive_linear(&n, &b.q.weight, &b.q.bias), naive_linear(&n, &b.k.weight, &b.k.bias), naive_linear(&n, &b.v.weight, &b.v.bias));
        let mut ctx = vec![vec![0.0; h * d]; l];
        for head in 0..h {
            for i in 0..l {
                let logits: Vec<f64> = (0..l)
                    .map(|j| (0..d).map(|t| q[i][head * d + t] * k[j][head * d + t]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|z| (z - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                for t in 0..d {
                    ctx[i][head * d + t] = (0..l).map(|j| e[j] / s * v[j][head * d + t]).sum();
                }
            }
        }
        let a = naive_linear(&ctx, &b.proj.weight, &b.proj.bias);
        for (xr, ar) in x.iter_mut().zip(&a) {
            xr.iter_mut().zip(ar).for_each(|(p, q)| *p += q);
        }
        let n2 = ln(&x, &b.ln2);
        let f: Vec<Vec<f64>> = naive_linear(&n2, &b.fc1.weight, &b.fc1.bias)
            .into_iter()
            .map(|r| r.into_iter().map(naive_gelu).collect())
            .collect();
        let mo = naive_linear(&f, &b.fc2.weight, &b.fc2.bias);
        for (xr, mr) in x.iter_mut().zip(&mo) {
            xr.iter_mut().zip(mr).for_each(|(p, q)| *p += q);
        }
    }
    ln(&x, &m.final_norm)
}

#[test]
fn float_reference_matches_naive_oracle() {
    let a = arch(16, 4, 8, 2);
    let model = FloatEncoder::random(a, 11).unwrap();
    for x in &gaussian(4, &a, 12).samples {
        let y = model.forward(x).unwrap();
        let want = naive_forward(&model, x);
        for (got, exp) in y.data().iter().zip(want.iter().flatten()) {
            assert!((got - exp).abs() < 1e-12, "{got} vs {exp}");
        }
    }
}

#[test]
fn float_softmax_rows_and_layernorm_moments() {
    let a = arch(16, 2, 8, 1);
    let model = FloatEncoder::random(a, 3).unwrap();
    let x = &gaussian(1, &a, 4).samples[0];
    let mut attn = Vec::new();
    let mut ln_in = Vec::new();
    let mut sink = |site: Site, t: &FloatTensor| match site.kind {
        SiteKind::Attn => attn.push(t.clone()),
        SiteKind::Ln1In | SiteKind::Ln2In | SiteKind::NormIn => ln_in.push(t.clone()),
        _ => {}
    };
    model.forward_with(x, &mut sink).unwrap();
    assert_eq!(attn.len(), 2);
    for row in attn.iter().flat_map(|t| t.rows()) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let plain = LayerNormAffine::new(vec![1.0; 16], vec![0.0; 16], 1e-12).unwrap();
    for t in &ln_in {
        for row in float_layernorm(t, &plain).unwrap().rows() {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5, "mean {mean} var {var}");
        }
    }
    let _ = model.forward_with(x, &mut NoSink).unwrap();
}

// ------------------------------------------------------- quantized linear

fn act(scale: f64, zp: i64) -> QuantParams {
    QuantParams::new(scale, zp, 8, Signedness::Unsigned).unwrap()
}

fn codes(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> IntTensor {
    let n = shape.iter().product();
    IntTensor::new(shape, (0..n).map(|_| rng.gen_range(0..=255)).collect(), 8, Signedness::Unsigned).unwrap()
}

#[test]
fn identity_linear_preserves_codes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = 8;
    let eye = FloatTensor::from_fn(vec![c, c], |i| if i / c == i % c { 1.0 } else { 0.0 }).unwrap();
    let w = quantize_weights_per_channel(&eye, 8).unwrap();
    let p = act(0.05, 100);
    let x = codes(&mut rng, vec![6, c]);
    let y = quantized_linear(&x, &w.codes, &vec![0.0; c], &p, &w.scales, &p).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn zero_linear_outputs_zero_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = quantize_weights_per_channel(&FloatTensor::zeros(vec![5, 7]), 8).unwrap();
    let out = act(0.1, 37);
    let y = quantized_linear(&codes(&mut rng, vec![3, 7]), &w.codes, &[0.0; 5], &act(0.02, 128), &w.scales, &out).unwrap();
    assert!(y.data().iter().all(|&v| v == 37));
}

#[test]
fn random_linear_within_requantization_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let (rows, j, out_ch) = (rng.gen_range(1..6), rng.gen_range(1..48), rng.gen_range(1..10));
        let w = quantize_weights_per_channel(&FloatTensor::new(vec![out_ch, j], random_floats(&mut rng, out_ch * j, 0.3)).unwrap(), 8).unwrap();
        let bias = random_floats(&mut rng, out_ch, 0.1);
        let input = act(rng.gen_range(0.005..0.1), rng.gen_range(0..=255));
        let x = codes(&mut rng, vec![rows, j]);
        let xf = dequantize_uniform(&x, &input);
        let wf = w.dequantize();
        let reference: Vec<f64> = (0..rows)
            .flat_map(|r| {
                let (xf, wf, bias) = (&xf, &wf, &bias);
                (0..out_ch).map(move |o| (0..j).map(|i| xf.row(r)[i] * wf.row(o)[i]).sum::<f64>() + bias[o])
            })
            .collect();
        let (lo, hi) = reference.iter().fold((0.0f64, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
        let out = QuantParams::from_bounds(lo, hi, 8).unwrap();
        let y = dequantize_uniform(&quantized_linear(&x, &w.codes, &bias, &input, &w.scales, &out).unwrap(), &out);
        for (i, (got, want)) in y.data().iter().zip(&reference).enumerate() {
            let bound = 0.5 * out.scale + input.scale * w.scales[i % out_ch] * j as f64 / 2.0;
            assert!((got - want).abs() <= bound, "{got} vs {want} (bound {bound})");
        }
    }
}

#[test]
fn qk_logits_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (qp, kp) = (act(0.03, 120), act(0.05, 90));
    let d = 8;
    // centered on the zero points: all logits vanish
    let zq = IntTensor::new(vec![3, d], vec![120; 3 * d], 8, Signedness::Unsigned).unwrap();
    let k = codes(&mut rng, vec![3, d]);
    assert!(quantized_qk_matmul(&zq, &k, &qp, &kp, d).unwrap().codes.data().iter().all(|&v| v == 0));
    for _ in 0..50 {
        let (q1, k1) = (codes(&mut rng, vec![1, d]), codes(&mut rng, vec![1, d]));
        let s = quantized_qk_matmul(&q1, &k1, &qp, &kp, d).unwrap();
        let exact: BigInt = (0..d).map(|t| BigInt::from(q1.data()[t] - 120) * BigInt::from(k1.data()[t] - 90)).sum();
        assert_eq!(BigInt::from(s.codes.data()[0]), exact);
        assert_eq!(s.scale, 0.03 * 0.05 / (d as f64).sqrt());
        assert_eq!(s.zero_point, 0);
    }
}

// ------------------------------------------------------- attention

#[test]
fn single_token_attention_reduces_to_value_projection() {
    let a = arch(8, 1, 1, 1);
    let model = FloatEncoder::random(a, 5).unwrap();
    let data = gaussian(16, &a, 6);
    for mode in [AttentionMode::Lis, AttentionMode::Uniform] {
        let q = calibrate(&model, &data, CalibrationConfig { attention_mode: mode, ..Default::default() });
        let plan = EncoderPlan::compile(&q).unwrap();
        let blk = &q.blocks[0];
        for h in ln1_codes(&plan, &data) {
            let v = quantized_linear(&h, &blk.v.weight.codes, &blk.v.bias, &blk.ln1.output, &blk.v.weight.scales, &blk.v.output).unwrap();
            // softmax of one logit is exactly 1, so the context is V requantized
            let ctx = quantize_uniform(&dequantize_uniform(&v, &blk.v.output), &blk.context);
            let want = quantized_linear(&ctx, &blk.proj.weight.codes, &blk.proj.bias, &blk.context, &blk.proj.weight.scales, &blk.proj.output).unwrap();
            assert_eq!(msa_forward(&h, &plan.blocks[0].msa).unwrap(), want, "{mode}");
        }
    }
}

// ------------------------------------------------------- blocks

#[test]
fn zeroed_block_is_a_residual_identity() {
    let a = arch(16, 2, 8, 1);
    let model = FloatEncoder::random(a, 7).unwrap().zeroed_linears();
    let data = gaussian(16, &a, 8);
    let q = calibrate(&model, &data, CalibrationConfig::default());
    let plan = EncoderPlan::compile(&q).unwrap();
    let target = plan.blocks[0].residual_mlp.target().clone();
    for x in &data.samples {
        let codes = plan.quantize_input(x).unwrap();
        let y = encoder_block_forward(&codes, &plan.blocks[0]).unwrap();
        let (xin, yout) = (dequantize_ptf(&codes, &plan.input).unwrap(), dequantize_ptf(&y, &target).unwrap());
        for (i, (u, v)) in xin.data().iter().zip(yout.data()).enumerate() {
            let c = i % 16;
            // two requantizations, each within half a step of its grid
            let bound = plan.input.channel_step(c).max(q.blocks[0].ln2.input.channel_step(c)) + target.channel_step(c);
            assert!((u - v).abs() <= bound, "{u} vs {v}");
        }
    }
}

#[test]
fn one_block_tracks_float_block() {
    let a = arch(32, 4, 16, 1);
    let model = FloatEncoder::random(a, 9).unwrap();
    let q = calibrate(&model, &gaussian(128, &a, 10), CalibrationConfig::default());
    let m = evaluate(&EncoderPlan::compile(&q).unwrap(), &gaussian(32, &a, 11), &model).unwrap();
    assert!(m.min_cosine >= 0.99, "{m:?}");
}

#[test]
fn ptf_beats_layerwise_layernorm_on_outlier_channels() {
    let a = arch(32, 4, 16, 1);
    let model = FloatEncoder::random(a, 12).unwrap();
    let spec = SyntheticSpec { kind: SyntheticKind::ChannelVariance, count: 64, tokens: 16, channels: 32, seed: 13, ..Default::default() };
    let data = generate(&spec).unwrap();
    let err = |k: u8| {
        let q = calibrate(&model, &data, CalibrationConfig { k, ..Default::default() });
        let plan = EncoderPlan::compile(&q).unwrap();
        let ln = &plan.blocks[0].ln1;
        let (mut got, mut want) = (Vec::new(), Vec::new());
        for x in &data.samples {
            let y = ln.apply(&plan.quantize_input(x).unwrap()).unwrap();
            got.extend(dequantize_uniform(&y, &ln.norm.output).into_data());
            want.extend(float_layernorm(x, &model.blocks[0].ln1).unwrap().into_data());
        }
        relative_l2(&got, &want)
    };
    let (ptf, layerwise) = (err(3), err(0));
    assert!(ptf < layerwise, "PTF {ptf} vs K=0 {layerwise}");
}

#[test]
fn residual_add_matches_real_sum_and_stays_in_range() {
    let a = arch(16, 2, 8, 1);
    let model = FloatEncoder::random(a, 14).unwrap();
    let q = calibrate(&model, &gaussian(16, &a, 15), CalibrationConfig::default());
    let plan = EncoderPlan::compile(&q).unwrap();
    let (blk, res) = (&q.blocks[0], &plan.blocks[0].residual_attn);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..20 {
        let skip = codes(&mut rng, vec![8, 16]);
        let branch = codes(&mut rng, vec![8, 16]);
        let y = res.apply(&skip, &branch).unwrap();
        assert_eq!((y.bits(), y.signedness()), (8, Signedness::Unsigned));
        let target = res.target();
        let sum = dequantize_ptf(&skip, &blk.ln1.input).unwrap().zip_with(&dequantize_uniform(&branch, &blk.proj.output), |p, q| p + q).unwrap();
        let got = dequantize_ptf(&y, target).unwrap();
        for (i, (&code, (g, s))) in y.data().iter().zip(got.data().iter().zip(sum.data())).enumerate() {
            assert!((0..=255).contains(&code));
            if code == 0 || code == 255 {
                continue;
            }
            assert!((g - s).abs() <= target.channel_step(i % 16) * (0.5 + 1e-6), "{g} vs {s}");
        }
    }
}

#[test]
fn wider_attention_codes_never_hurt_in_aggregate() {
    let a = arch(32, 4, 16, 1);
    let (mut e8, mut e4) = (0.0, 0.0);
    for seed in 0..5 {
        let model = FloatEncoder::random(a, 100 + seed).unwrap();
        let calib = gaussian(64, &a, 200 + seed);
        let eval = gaussian(20, &a, 300 + seed);
        for (attn, acc) in [(8, &mut e8), (4, &mut e4)] {
            let bits = BitTriple { attn, ..Default::default() };
            let plan = EncoderPlan::compile(&calibrate(&model, &calib, CalibrationConfig { bits, ..Default::default() })).unwrap();
            *acc += evaluate(&plan, &eval, &model).unwrap().mean_relative_l2;
        }
    }
    assert!(e8 <= e4, "8/8/8 error {e8} vs 8/8/4 {e4}");
}

// ------------------------------------------------------- calibration

#[test]
fn evaluation_is_pure_and_calibration_deterministic() {
    let a = arch(16, 2, 8, 1);
    let model = FloatEncoder::random(a, 17).unwrap();
    let data = gaussian(40, &a, 18);
    let cfg = CalibrationConfig { num_samples: 24, seed: 5, ..Default::default() };
    let q1 = run_calibration(&model, &data, &cfg).unwrap();
    let q2 = run_calibration(&model, &data, &cfg).unwrap();
    assert_eq!(q1.to_container().unwrap().encode().unwrap(), q2.to_container().unwrap().encode().unwrap());
    let plan = EncoderPlan::compile(&q1).unwrap();
    assert_eq!(evaluate(&plan, &data, &model).unwrap(), evaluate(&plan, &data, &model).unwrap());
}

#[test]
fn models_round_trip_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let a = arch(16, 2, 8, 2);
    let model = FloatEncoder::random(a, 19).unwrap();
    let fpath = dir.path().join("float.intq");
    model.save(&fpath).unwrap();
    let loaded = FloatEncoder::load(&fpath).unwrap();
    assert_eq!(loaded, model);
    let q = calibrate(&model, &gaussian(8, &a, 20), CalibrationConfig { k: 2, ..Default::default() });
    let (p1, p2) = (dir.path().join("q1.intq"), dir.path().join("q2.intq"));
    q.save(&p1).unwrap();
    let back = QuantizedEncoderModel::load(&p1).unwrap();
    assert_eq!(back, q);
    back.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    // a float model is not a quantized one
    assert!(QuantizedEncoderModel::load(&fpath).is_err());
}
