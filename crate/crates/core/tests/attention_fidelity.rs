//! Attention-branch fidelity of the 4-bit log2 attention path, measured
//! against the float attention evaluated on the same LayerNorm output.
//!
//! At toy scale the power-of-two rounding of every attention weight leaves
//! roughly 20% relative error in the attention branch, and 4-bit uniform
//! coding of the same probabilities lands slightly below that. Both
//! assertions below are kept at their stated thresholds.

use intq::calibrate::{cosine_similarity, relative_l2, CalibrationConfig};
use intq::model::{msa_forward, Architecture, AttentionMode, EncoderPlan, FloatEncoder, NoSink};
use intq::quant::dequantize_uniform;

mod common;
use common::{arch, calibrate, gaussian, ln1_codes};

/// Relative error of each attention mode's MSA output against the float
/// attention branch evaluated on the same dequantized LayerNorm output.
fn msa_errors(seed: u64, samples: usize) -> Vec<(f64, f64, f64, f64)> {
    let a = Architecture::default();
    let float = FloatEncoder::random(arch(a.embed_dim, a.num_heads, a.tokens, 1), seed).unwrap();
    let calib = gaussian(64, &float.arch, seed + 1000);
    let eval = gaussian(samples, &float.arch, seed + 2000);
    let mut plans = Vec::new();
    for mode in [AttentionMode::Lis, AttentionMode::Uniform] {
        let q = calibrate(&float, &calib, CalibrationConfig { attention_mode: mode, ..Default::default() });
        let plan = EncoderPlan::compile(&q).unwrap();
        plans.push((q, plan));
    }
    let (lis_q, lis) = &plans[0];
    let (_, uni) = &plans[1];
    let proj_out = lis_q.blocks[0].proj.output;
    ln1_codes(lis, &eval)
        .iter()
        .map(|h| {
            let hf = dequantize_uniform(h, &lis_q.blocks[0].ln1.output);
            let reference = float.attention(0, &hf, &mut NoSink).unwrap();
            let out = |p: &EncoderPlan| dequantize_uniform(&msa_forward(h, &p.blocks[0].msa).unwrap(), &proj_out);
            let (l, u) = (out(lis), out(uni));
            (
                relative_l2(l.data(), reference.data()),
                relative_l2(u.data(), reference.data()),
                cosine_similarity(l.data(), reference.data()),
                cosine_similarity(u.data(), reference.data()),
            )
        })
        .collect()
}

#[test]
fn lis_attention_tracks_float_attention() {
    let errs: Vec<_> = (0..4).flat_map(|s| msa_errors(s, 25)).collect();
    let mean_cos = errs.iter().map(|e| e.2).sum::<f64>() / errs.len() as f64;
    println!("LIS MSA cosine vs float attention: mean {mean_cos:.5}");
    assert!(mean_cos >= 0.99, "mean cosine {mean_cos}");
}

#[test]
fn uniform_four_bit_attention_errs_more_than_lis() {
    let errs: Vec<_> = (0..4).flat_map(|s| msa_errors(s, 25)).collect();
    assert!(errs.len() >= 100);
    let lis = errs.iter().map(|e| e.0).sum::<f64>() / errs.len() as f64;
    let uni = errs.iter().map(|e| e.1).sum::<f64>() / errs.len() as f64;
    println!("MSA relative error over {} trials: LIS {lis:.4}, uniform {uni:.4}", errs.len());
    assert!(uni > lis, "uniform {uni} vs LIS {lis}");
}
