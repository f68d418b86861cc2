use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ActivationSink, Architecture, Encoder, NoSink, Site, SiteKind};
use crate::error::{dimension, Result};
use crate::lis::softmax_row;
use crate::ptf::{float_layernorm, LayerNormAffine};
use crate::tensor::FloatTensor;
use crate::trace;

/// `y = x·Wᵀ + b` with `W` stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: FloatTensor,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &FloatTensor) -> Result<FloatTensor> {
        let (inp, out) = (self.in_features(), self.out_features());
        if x.last_dim() != inp {
            return Err(dimension(format!("linear expects {inp} inputs, got {:?}", x.shape())));
        }
        trace::record_float(x.num_rows() * inp * out * 2);
        let w = self.weight.data();
        let mut data = Vec::with_capacity(x.num_rows() * out);
        for row in x.rows() {
            for o in 0..out {
                let wr = &w[o * inp..(o + 1) * inp];
                data.push(row.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>() + self.bias[o]);
            }
        }
        FloatTensor::new(vec![x.num_rows(), out], data)
    }
}

/// tanh-form GELU, shared by the float and quantized paths.
pub fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // √(2/π)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FloatBlock {
    pub ln1: LayerNormAffine,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub ln2: LayerNormAffine,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Standard deviations used by [`FloatEncoder::random`], as multiples of
/// `1/√fan_in`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitScales {
    pub qk: f64,
    pub v: f64,
    pub proj: f64,
    pub fc1: f64,
    pub fc2: f64,
    pub bias: f64,
    pub ln_gamma_noise: f64,
    pub ln_beta_noise: f64,
}

impl Default for InitScales {
    fn default() -> Self {
        // Unit gains give attention logits with roughly unit std.
        Self { qk: 1.0, v: 1.0, proj: 0.5, fc1: 1.0, fc2: 0.5, bias: 0.02, ln_gamma_noise: 0.1, ln_beta_noise: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FloatEncoder {
    pub arch: Architecture,
    pub blocks: Vec<FloatBlock>,
    pub final_norm: LayerNormAffine,
}

impl FloatEncoder {
    pub fn random(arch: Architecture, seed: u64) -> Result<Self> {
        Self::random_with(arch, seed, InitScales::default())
    }

    pub fn random_with(arch: Architecture, seed: u64, scales: InitScales) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut sample = |n: usize, std: f64| -> Vec<f64> {
            (0..n).map(|_| std * std_normal.sample(&mut rng)).collect()
        };
        let c = arch.embed_dim;
        let h = arch.hidden_dim();
        let mut linear = |out: usize, inp: usize, gain: f64| -> Result<Linear> {
            let w = sample(out * inp, gain / (inp as f64).sqrt());
            let b = sample(out, scales.bias);
            Ok(Linear { weight: FloatTensor::new(vec![out, inp], w)?, bias: b })
        };
        let mut blocks = Vec::with_capacity(arch.num_blocks);
        for _ in 0..arch.num_blocks {
            let q = linear(c, c, scales.qk)?;
            let k = linear(c, c, scales.qk)?;
            let v = linear(c, c, scales.v)?;
            let proj = linear(c, c, scales.proj)?;
            let fc1 = linear(h, c, scales.fc1)?;
            let fc2 = linear(c, h, scales.fc2)?;
            blocks.push(FloatBlock {
                ln1: LayerNormAffine::identity(c),
                q,
                k,
                v,
                proj,
                ln2: LayerNormAffine::identity(c),
                fc1,
                fc2,
            });
        }
        let mut noisy_norm = || -> Result<LayerNormAffine> {
            let g = sample(c, scales.ln_gamma_noise).into_iter().map(|v| 1.0 + v).collect();
            let b = sample(c, scales.ln_beta_noise);
            LayerNormAffine::new(g, b, 1e-5)
        };
        for b in &mut blocks {
            b.ln1 = noisy_norm()?;
            b.ln2 = noisy_norm()?;
        }
        let final_norm = noisy_norm()?;
        Ok(Self { arch, blocks, final_norm })
    }

    /// Same architecture with every linear weight and bias set to zero.
    pub fn zeroed_linears(&self) -> Self {
        let zero = |l: &Linear| Linear {
            weight: FloatTensor::zeros(l.weight.shape().to_vec()),
            bias: vec![0.0; l.bias.len()],
        };
        let mut out = self.clone();
        for b in &mut out.blocks {
            for l in [&mut b.q, &mut b.k, &mut b.v, &mut b.proj, &mut b.fc1, &mut b.fc2] {
                *l = zero(l);
            }
        }
        out
    }

    pub fn check_input(&self, x: &FloatTensor) -> Result<()> {
        if x.shape() != self.arch.input_shape().as_slice() {
            return Err(dimension(format!(
                "expected input of shape {:?}, got {:?}",
                self.arch.input_shape(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// Float self-attention over `h` (`[L, C]`), reporting intermediate sites.
    pub fn attention(
        &self,
        block_idx: usize,
        h: &FloatTensor,
        sink: &mut dyn ActivationSink,
    ) -> Result<FloatTensor> {
        let blk = &self.blocks[block_idx];
        let site = |kind| Site::block(block_idx, kind);
        let q = blk.q.forward(h)?;
        sink.record(site(SiteKind::Q), &q);
        let k = blk.k.forward(h)?;
        sink.record(site(SiteKind::K), &k);
        let v = blk.v.forward(h)?;
        sink.record(site(SiteKind::V), &v);
        let (l, c, d) = (h.num_rows(), self.arch.embed_dim, self.arch.head_dim());
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let mut ctx = vec![0.0; l * c];
        trace::record_float(self.arch.num_heads * l * l * d * 4);
        for head in 0..self.arch.num_heads {
            let off = head * d;
            let mut probs = Vec::with_capacity(l * l);
            for i in 0..l {
                let qi = &q.row(i)[off..off + d];
                let logits: Vec<f64> = (0..l)
                    .map(|j| qi.iter().zip(&k.row(j)[off..off + d]).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt_d)
                    .collect();
                probs.extend(softmax_row(&logits));
            }
            let probs = FloatTensor::new(vec![l, l], probs)?;
            sink.record(site(SiteKind::Attn), &probs);
            for i in 0..l {
                let pi = probs.row(i);
                for t in 0..d {
                    ctx[i * c + off + t] = (0..l).map(|j| pi[j] * v.row(j)[off + t]).sum();
                }
            }
        }
        let ctx = FloatTensor::new(vec![l, c], ctx)?;
        sink.record(site(SiteKind::Context), &ctx);
        let o = blk.proj.forward(&ctx)?;
        sink.record(site(SiteKind::Proj), &o);
        Ok(o)
    }

    /// Full float forward pass reporting every quantization site to `sink`.
    pub fn forward_with(&self, x: &FloatTensor, sink: &mut dyn ActivationSink) -> Result<FloatTensor> {
        self.check_input(x)?;
        let mut x = x.clone();
        for (i, blk) in self.blocks.iter().enumerate() {
            let site = |kind| Site::block(i, kind);
            sink.record(site(SiteKind::Ln1In), &x);
            let h = float_layernorm(&x, &blk.ln1)?;
            sink.record(site(SiteKind::Ln1Out), &h);
            let a = self.attention(i, &h, sink)?;
            x = x.zip_with(&a, |p, q| p + q)?;
            sink.record(site(SiteKind::Ln2In), &x);
            let h2 = float_layernorm(&x, &blk.ln2)?;
            sink.record(site(SiteKind::Ln2Out), &h2);
            let f = blk.fc1.forward(&h2)?;
            sink.record(site(SiteKind::Fc1), &f);
            let g = f.map(gelu)?;
            sink.record(site(SiteKind::Gelu), &g);
            let m = blk.fc2.forward(&g)?;
            sink.record(site(SiteKind::Fc2), &m);
            x = x.zip_with(&m, |p, q| p + q)?;
        }
        sink.record(Site::final_norm(SiteKind::NormIn), &x);
        let y = float_layernorm(&x, &self.final_norm)?;
        sink.record(Site::final_norm(SiteKind::NormOut), &y);
        Ok(y)
    }
}

impl Encoder for FloatEncoder {
    /// The float reference forward pass.
    fn forward(&self, x: &FloatTensor) -> Result<FloatTensor> {
        self.forward_with(x, &mut NoSink)
    }
}
