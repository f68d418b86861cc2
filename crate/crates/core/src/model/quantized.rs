use super::{AttentionMode, EncoderConfig, Encoder, LayerNormMode};
use crate::error::{contract, dimension, Result};
use crate::lis::{attn_value_accumulate, softmax_row, IExpConstants, LisPlan};
use crate::numeric::{round_to_i64, shift_right_round};
use crate::ptf::{
    dequantize_ptf, float_layernorm, integer_layernorm, quantize_ptf, LayerNormAffine, PtfParams,
};
use crate::quant::{dequantize_uniform, quantize_uniform, ChannelWeights, QuantParams, Requantizer};
use crate::tensor::{widen_matmul, FloatTensor, IntTensor, ScaledInt, Signedness};
use crate::trace;

/// A linear layer with symmetric per-output-channel weights.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLinear {
    pub weight: ChannelWeights,
    pub bias: Vec<f64>,
    pub output: QuantParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedNorm {
    pub input: PtfParams,
    pub affine: LayerNormAffine,
    pub output: QuantParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedBlock {
    pub ln1: QuantizedNorm,
    pub q: QuantizedLinear,
    pub k: QuantizedLinear,
    pub v: QuantizedLinear,
    /// Attention probabilities, used by [`AttentionMode::Uniform`].
    pub attn: QuantParams,
    /// Concatenated per-head `Attn·V` before the output projection.
    pub context: QuantParams,
    pub proj: QuantizedLinear,
    pub ln2: QuantizedNorm,
    pub fc1: QuantizedLinear,
    pub gelu: QuantParams,
    pub fc2: QuantizedLinear,
}

/// A calibrated, fully quantized encoder. Immutable after calibration;
/// [`EncoderPlan::compile`] folds it into integer constants for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedEncoderModel {
    pub config: EncoderConfig,
    pub blocks: Vec<QuantizedBlock>,
    pub final_norm: QuantizedNorm,
}

impl QuantizedEncoderModel {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let arch = &self.config.arch;
        if self.blocks.len() != arch.num_blocks {
            return Err(contract(format!(
                "config declares {} blocks but {} are present",
                arch.num_blocks,
                self.blocks.len()
            )));
        }
        let c = arch.embed_dim;
        let h = arch.hidden_dim();
        let check_norm = |n: &QuantizedNorm| -> Result<()> {
            if n.input.channels() != c || n.affine.channels() != c {
                return Err(dimension(format!("LayerNorm parameters must cover {c} channels")));
            }
            Ok(())
        };
        let check_linear = |l: &QuantizedLinear, out: usize, inp: usize| -> Result<()> {
            if l.weight.codes.shape() != [out, inp] || l.weight.scales.len() != out || l.bias.len() != out {
                return Err(dimension(format!("linear layer must be [{out}, {inp}]")));
            }
            if l.weight.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(contract("weight scales must be positive"));
            }
            if l.bias.iter().any(|b| !b.is_finite()) {
                return Err(contract("non-finite bias"));
            }
            Ok(())
        };
        for b in &self.blocks {
            check_norm(&b.ln1)?;
            check_norm(&b.ln2)?;
            for l in [&b.q, &b.k, &b.v, &b.proj] {
                check_linear(l, c, c)?;
            }
            check_linear(&b.fc1, h, c)?;
            check_linear(&b.fc2, c, h)?;
        }
        check_norm(&self.final_norm)
    }
}

/// Integer-only linear layer: centered input codes times weight codes in a
/// 64-bit accumulator, integer bias, fixed-point requantization.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearPlan {
    weight_t: IntTensor,
    bias_acc: Vec<i64>,
    requant: Vec<Requantizer>,
    input_zero_point: i64,
    input_bits: u32,
    output: QuantParams,
}

impl LinearPlan {
    pub fn new(layer: &QuantizedLinear, input: &QuantParams) -> Result<Self> {
        let out = layer.weight.scales.len();
        trace::record_float(out * 3);
        let acc_scales: Vec<f64> = layer.weight.scales.iter().map(|sw| input.scale * sw).collect();
        let ratios: Vec<f64> = acc_scales.iter().map(|a| a / layer.output.scale).collect();
        let requant = ratios.iter().map(|&r| Requantizer::from_ratio(r)).collect::<Result<Vec<_>>>()?;
        let bias_acc = layer.bias.iter().zip(&acc_scales).map(|(b, a)| round_to_i64(b / a)).collect();
        Ok(Self {
            weight_t: layer.weight.codes.transpose2()?,
            bias_acc,
            requant,
            input_zero_point: input.zero_point,
            input_bits: input.bits,
            output: layer.output,
        })
    }

    pub fn output(&self) -> &QuantParams {
        &self.output
    }

    pub fn apply(&self, x: &IntTensor) -> Result<IntTensor> {
        let centered = center(x, self.input_zero_point, self.input_bits)?;
        let acc = widen_matmul(&centered, &self.weight_t)?;
        let out = self.bias_acc.len();
        let (zp, lo, hi) = (self.output.zero_point, self.output.qmin(), self.output.qmax());
        let data = acc
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let o = i % out;
                let v = self.requant[o].apply(a.saturating_add(self.bias_acc[o]));
                v.saturating_add(zp).clamp(lo, hi)
            })
            .collect();
        IntTensor::new(acc.shape().to_vec(), data, self.output.bits, self.output.signedness)
    }
}

/// `q − zp` as signed codes one bit wider than the input.
fn center(x: &IntTensor, zero_point: i64, bits: u32) -> Result<IntTensor> {
    let data = x.data().iter().map(|&v| v - zero_point).collect();
    IntTensor::new(x.shape().to_vec(), data, (bits + 1).min(64), Signedness::Signed)
}

/// `clip(⌊(s_in·s_w/s_out)·acc + b/s_out⌉ + zp_out)` computed as integer
/// matmul plus fixed-point requantization.
pub fn quantized_linear(
    x: &IntTensor,
    weight: &IntTensor,
    bias: &[f64],
    input: &QuantParams,
    weight_scales: &[f64],
    output: &QuantParams,
) -> Result<IntTensor> {
    let layer = QuantizedLinear {
        weight: ChannelWeights { codes: weight.clone(), scales: weight_scales.to_vec() },
        bias: bias.to_vec(),
        output: *output,
    };
    if weight_scales.len() != weight.shape()[0] || bias.len() != weight.shape()[0] {
        return Err(dimension("one weight scale and bias per output channel required"));
    }
    LinearPlan::new(&layer, input)?.apply(x)
}

/// Integer logits `(Q − zp_q)(K − zp_k)ᵀ`.
fn qk_logits(q: &IntTensor, k: &IntTensor, q_params: &QuantParams, k_params: &QuantParams) -> Result<IntTensor> {
    let qc = center(q, q_params.zero_point, q_params.bits)?;
    let kt = center(k, k_params.zero_point, k_params.bits)?.transpose2()?;
    widen_matmul(&qc, &kt)
}

/// `Q∘Kᵀ` on codes with the attention temperature folded into the scale
/// `s_q·s_k/√d`; the result feeds Softmax directly.
pub fn quantized_qk_matmul(
    q: &IntTensor,
    k: &IntTensor,
    q_params: &QuantParams,
    k_params: &QuantParams,
    head_dim: usize,
) -> Result<ScaledInt> {
    if q.shape().get(1) != k.shape().get(1) || q.shape().get(1) != Some(&head_dim) {
        return Err(dimension(format!("Q {:?} and K {:?} must be [*, {head_dim}]", q.shape(), k.shape())));
    }
    let logits = qk_logits(q, k, q_params, k_params)?;
    trace::record_float(2);
    ScaledInt::new(logits, q_params.scale * k_params.scale / (head_dim as f64).sqrt(), 0)
}

/// LayerNorm on PTF codes, integer or float according to the mode.
#[derive(Clone, Debug, PartialEq)]
pub struct NormPlan {
    pub norm: QuantizedNorm,
    pub mode: LayerNormMode,
}

impl NormPlan {
    pub fn apply(&self, x: &IntTensor) -> Result<IntTensor> {
        match self.mode {
            LayerNormMode::PtfInteger => integer_layernorm(x, &self.norm.input, &self.norm.affine, &self.norm.output),
            LayerNormMode::Float => {
                let xf = dequantize_ptf(x, &self.norm.input)?;
                let y = float_layernorm(&xf, &self.norm.affine)?;
                Ok(quantize_uniform(&y, &self.norm.output))
            }
        }
    }
}

/// Residual addition onto the next LayerNorm input grid.
///
/// The skip branch arrives as PTF codes, the other branch as uniform codes.
/// Both are rescaled onto the target channel step `2^{α_c}·s_t` with
/// per-channel fixed-point multipliers that share one shift, added as
/// integers and rounded once.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualPlan {
    skip: PtfParams,
    branch_zero_point: i64,
    target: PtfParams,
    skip_mult: Vec<Requantizer>,
    branch_mult: Vec<Requantizer>,
}

impl ResidualPlan {
    pub fn new(skip: &PtfParams, branch: &QuantParams, target: &PtfParams) -> Result<Self> {
        if skip.channels() != target.channels() {
            return Err(dimension("residual branches cover different channel counts"));
        }
        let mut skip_mult = Vec::with_capacity(target.channels());
        let mut branch_mult = Vec::with_capacity(target.channels());
        for c in 0..target.channels() {
            let step = target.channel_step(c);
            let pair = Requantizer::shared(&[skip.scale / step, branch.scale / step])?;
            skip_mult.push(pair[0]);
            branch_mult.push(pair[1]);
        }
        Ok(Self {
            skip: skip.clone(),
            branch_zero_point: branch.zero_point,
            target: target.clone(),
            skip_mult,
            branch_mult,
        })
    }

    pub fn target(&self) -> &PtfParams {
        &self.target
    }

    pub fn apply(&self, skip: &IntTensor, branch: &IntTensor) -> Result<IntTensor> {
        if skip.shape() != branch.shape() || skip.last_dim() != self.target.channels() {
            return Err(dimension(format!("residual shapes {:?} and {:?}", skip.shape(), branch.shape())));
        }
        let (zp_t, qmax) = (self.target.zero_point, self.target.qmax());
        let mut data = Vec::with_capacity(skip.len());
        for (srow, brow) in skip.rows().zip(branch.rows()) {
            for (c, (&s, &b)) in srow.iter().zip(brow).enumerate() {
                let xs = ((s - self.skip.zero_point) << self.skip.alpha[c]) as i128;
                let xb = (b - self.branch_zero_point) as i128;
                let (ms, mb) = (&self.skip_mult[c], &self.branch_mult[c]);
                let sum = xs * ms.multiplier as i128 + xb * mb.multiplier as i128;
                let v = shift_right_round(sum, ms.shift) as i64;
                data.push(v.saturating_add(zp_t).clamp(0, qmax));
            }
        }
        IntTensor::new(skip.shape().to_vec(), data, self.target.bits, Signedness::Unsigned)
    }
}

/// Multi-head self-attention with every scale folded to integers.
#[derive(Clone, Debug, PartialEq)]
pub struct MsaPlan {
    pub mode: AttentionMode,
    pub heads: usize,
    pub head_dim: usize,
    q: LinearPlan,
    k: LinearPlan,
    v: LinearPlan,
    proj: LinearPlan,
    q_params: QuantParams,
    k_params: QuantParams,
    v_params: QuantParams,
    attn_params: QuantParams,
    context: QuantParams,
    logit_scale: f64,
    attn_bits: u32,
    lis: Option<LisPlan>,
    /// `s_V / s_context`; the bit-shift base is applied as an extra shift.
    lis_context: Requantizer,
    /// `s_attn·s_V / s_context` for uniformly coded attention.
    uniform_context: Requantizer,
}

impl MsaPlan {
    pub fn new(block: &QuantizedBlock, config: &EncoderConfig) -> Result<Self> {
        let arch = &config.arch;
        let head_dim = arch.head_dim();
        let q_params = block.q.output;
        let k_params = block.k.output;
        let v_params = block.v.output;
        trace::record_float(6);
        let logit_scale = q_params.scale * k_params.scale / (head_dim as f64).sqrt();
        let lis = match config.attention_mode {
            AttentionMode::Lis => Some(LisPlan::new(logit_scale, config.bits.attn, &IExpConstants::default())?),
            _ => None,
        };
        Ok(Self {
            mode: config.attention_mode,
            heads: arch.num_heads,
            head_dim,
            q: LinearPlan::new(&block.q, &block.ln1.output)?,
            k: LinearPlan::new(&block.k, &block.ln1.output)?,
            v: LinearPlan::new(&block.v, &block.ln1.output)?,
            proj: LinearPlan::new(&block.proj, &block.context)?,
            q_params,
            k_params,
            v_params,
            attn_params: block.attn,
            context: block.context,
            logit_scale,
            attn_bits: config.bits.attn,
            lis,
            lis_context: Requantizer::from_ratio(v_params.scale / block.context.scale)?,
            uniform_context: Requantizer::from_ratio(block.attn.scale * v_params.scale / block.context.scale)?,
        })
    }

    pub fn logit_scale(&self) -> f64 {
        self.logit_scale
    }
}

/// Multi-head self-attention on LayerNorm output codes, returning output
/// projection codes.
///
/// In [`AttentionMode::Lis`] the whole pipeline (projections, `Q∘Kᵀ`,
/// Log-Int-Softmax, bit-shift `Attn·V`, requantization, output projection)
/// runs on integers.
pub fn msa_forward(x: &IntTensor, plan: &MsaPlan) -> Result<IntTensor> {
    let [l, c] = x.shape()[..] else {
        return Err(dimension("msa_forward expects [L, C] codes"));
    };
    if c != plan.heads * plan.head_dim {
        return Err(dimension(format!("expected {} channels, got {c}", plan.heads * plan.head_dim)));
    }
    let q = plan.q.apply(x)?;
    let k = plan.k.apply(x)?;
    let v = plan.v.apply(x)?;
    let d = plan.head_dim;
    let ctx_p = plan.context;
    let (ctx_zp, ctx_lo, ctx_hi) = (ctx_p.zero_point, ctx_p.qmin(), ctx_p.qmax());
    let mut ctx = vec![0i64; l * c];
    for h in 0..plan.heads {
        let off = h * d;
        let qh = q.column_slice(off, d)?;
        let kh = k.column_slice(off, d)?;
        let vh = v.column_slice(off, d)?;
        match plan.mode {
            AttentionMode::Lis => {
                let lis = plan.lis.as_ref().expect("LIS plan present in LIS mode");
                let logits = qk_logits(&qh, &kh, &plan.q_params, &plan.k_params)?;
                let n = (1i64 << lis.bits) - 1;
                for (i, row) in logits.rows().enumerate() {
                    let codes = lis.apply_row(row)?;
                    let exps: Vec<i64> = codes.iter().map(|&cd| n - cd).collect();
                    let (acc, base) = attn_value_accumulate(&exps, n, &vh, plan.v_params.zero_point)?;
                    for (t, a) in acc.into_iter().enumerate() {
                        let y = plan.lis_context.apply_with_shift(a, base);
                        ctx[i * c + off + t] = y.saturating_add(ctx_zp).clamp(ctx_lo, ctx_hi);
                    }
                }
            }
            AttentionMode::Uniform => {
                let logits = qk_logits(&qh, &kh, &plan.q_params, &plan.k_params)?;
                trace::record_float(logits.len());
                let scale = plan.logit_scale;
                let ap = plan.attn_params;
                let mut attn = Vec::with_capacity(l * l);
                for row in logits.rows() {
                    let real: Vec<f64> = row.iter().map(|&z| z as f64 * scale).collect();
                    attn.extend(softmax_row(&real).into_iter().map(|p| ap.quantize_value(p) - ap.zero_point));
                }
                let attn = IntTensor::new(vec![l, l], attn, plan.attn_bits + 1, Signedness::Signed)?;
                let vc = center(&vh, plan.v_params.zero_point, plan.v_params.bits)?;
                let acc = widen_matmul(&attn, &vc)?;
                for i in 0..l {
                    for t in 0..d {
                        let y = plan.uniform_context.apply(acc.data()[i * d + t]);
                        ctx[i * c + off + t] = y.saturating_add(ctx_zp).clamp(ctx_lo, ctx_hi);
                    }
                }
            }
            AttentionMode::Float => {
                let qf = dequantize_uniform(&qh, &plan.q_params);
                let kf = dequantize_uniform(&kh, &plan.k_params);
                let vf = dequantize_uniform(&vh, &plan.v_params);
                trace::record_float(l * l * d * 4);
                let inv = 1.0 / (d as f64).sqrt();
                for i in 0..l {
                    let logits: Vec<f64> = (0..l)
                        .map(|j| qf.row(i).iter().zip(kf.row(j)).map(|(a, b)| a * b).sum::<f64>() * inv)
                        .collect();
                    let p = softmax_row(&logits);
                    for t in 0..d {
                        let val: f64 = (0..l).map(|j| p[j] * vf.row(j)[t]).sum();
                        ctx[i * c + off + t] = ctx_p.quantize_value(val);
                    }
                }
            }
        }
    }
    let ctx = IntTensor::new(vec![l, c], ctx, ctx_p.bits, ctx_p.signedness)?;
    plan.proj.apply(&ctx)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockPlan {
    pub ln1: NormPlan,
    pub msa: MsaPlan,
    pub residual_attn: ResidualPlan,
    pub ln2: NormPlan,
    pub fc1: LinearPlan,
    pub fc1_output: QuantParams,
    pub gelu: QuantParams,
    pub fc2: LinearPlan,
    /// Onto the next LayerNorm input (next block's `ln1` or the final norm).
    pub residual_mlp: ResidualPlan,
}

impl BlockPlan {
    pub fn new(block: &QuantizedBlock, next_input: &PtfParams, config: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            ln1: NormPlan { norm: block.ln1.clone(), mode: config.layernorm_mode },
            msa: MsaPlan::new(block, config)?,
            residual_attn: ResidualPlan::new(&block.ln1.input, &block.proj.output, &block.ln2.input)?,
            ln2: NormPlan { norm: block.ln2.clone(), mode: config.layernorm_mode },
            fc1: LinearPlan::new(&block.fc1, &block.ln2.output)?,
            fc1_output: block.fc1.output,
            gelu: block.gelu,
            fc2: LinearPlan::new(&block.fc2, &block.gelu)?,
            residual_mlp: ResidualPlan::new(&block.ln2.input, &block.fc2.output, next_input)?,
        })
    }
}

/// One pre-norm block on PTF codes of its `ln1` input, returning PTF codes
/// of the next LayerNorm input.
///
/// GELU is evaluated on dequantized values and requantized; it is the only
/// real-valued step on this path besides the per-token LayerNorm folding.
pub fn encoder_block_forward(x: &IntTensor, plan: &BlockPlan) -> Result<IntTensor> {
    let h = plan.ln1.apply(x)?;
    let a = msa_forward(&h, &plan.msa)?;
    let x2 = plan.residual_attn.apply(x, &a)?;
    let h2 = plan.ln2.apply(&x2)?;
    let f = plan.fc1.apply(&h2)?;
    let g = dequantize_uniform(&f, &plan.fc1_output).map(super::gelu)?;
    let g = quantize_uniform(&g, &plan.gelu);
    let m = plan.fc2.apply(&g)?;
    plan.residual_mlp.apply(&x2, &m)
}

/// A quantized model compiled for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderPlan {
    pub config: EncoderConfig,
    pub input: PtfParams,
    pub blocks: Vec<BlockPlan>,
    pub final_norm: NormPlan,
}

impl EncoderPlan {
    pub fn compile(model: &QuantizedEncoderModel) -> Result<Self> {
        model.validate()?;
        let config = model.config;
        let mut blocks = Vec::with_capacity(model.blocks.len());
        for (i, b) in model.blocks.iter().enumerate() {
            let next = model.blocks.get(i + 1).map_or(&model.final_norm.input, |n| &n.ln1.input);
            blocks.push(BlockPlan::new(b, next, &config)?);
        }
        let input = model.blocks.first().map_or(&model.final_norm.input, |b| &b.ln1.input).clone();
        Ok(Self {
            config,
            input,
            blocks,
            final_norm: NormPlan { norm: model.final_norm.clone(), mode: config.layernorm_mode },
        })
    }

    pub fn quantize_input(&self, x: &FloatTensor) -> Result<IntTensor> {
        if x.shape() != self.config.arch.input_shape().as_slice() {
            return Err(dimension(format!(
                "expected input of shape {:?}, got {:?}",
                self.config.arch.input_shape(),
                x.shape()
            )));
        }
        quantize_ptf(x, &self.input)
    }

    /// Codes in, final LayerNorm output codes out.
    pub fn forward_codes(&self, x: &IntTensor) -> Result<IntTensor> {
        let mut x = x.clone();
        for b in &self.blocks {
            x = encoder_block_forward(&x, b)?;
        }
        self.final_norm.apply(&x)
    }
}

impl Encoder for EncoderPlan {
    fn forward(&self, x: &FloatTensor) -> Result<FloatTensor> {
        let q = self.quantize_input(x)?;
        let y = self.forward_codes(&q)?;
        Ok(dequantize_uniform(&y, &self.final_norm.norm.output))
    }
}
