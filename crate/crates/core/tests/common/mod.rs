#![allow(dead_code)]
//! Helpers shared by the model-level test targets.

use intq::calibrate::{run_calibration, CalibrationConfig};
use intq::data::{generate, Dataset, SyntheticSpec};
use intq::model::{Architecture, EncoderPlan, FloatEncoder, QuantizedEncoderModel};
use intq::IntTensor;

pub fn arch(embed_dim: usize, num_heads: usize, tokens: usize, num_blocks: usize) -> Architecture {
    Architecture { embed_dim, num_heads, tokens, mlp_ratio: 2, num_blocks }
}

pub fn gaussian(count: usize, a: &Architecture, seed: u64) -> Dataset {
    generate(&SyntheticSpec { count, tokens: a.tokens, channels: a.embed_dim, seed, ..Default::default() }).unwrap()
}

pub fn calibrate(model: &FloatEncoder, data: &Dataset, cfg: CalibrationConfig) -> QuantizedEncoderModel {
    run_calibration(model, data, &CalibrationConfig { num_samples: data.len(), ..cfg }).unwrap()
}

/// Quantized LayerNorm-1 output codes for each sample.
pub fn ln1_codes(plan: &EncoderPlan, data: &Dataset) -> Vec<IntTensor> {
    data.samples
        .iter()
        .map(|x| plan.blocks[0].ln1.apply(&plan.quantize_input(x).unwrap()).unwrap())
        .collect()
}
