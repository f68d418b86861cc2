//! Model (de)serialization through [`Container`].
//!
//! Scalars live in metadata, written with `{:?}` so `f64` values round-trip
//! exactly; weights, per-channel scales, affine parameters and PTF factors
//! are tensors.

use std::path::Path;

use super::{
    Architecture, BitTriple, EncoderConfig, FloatBlock, FloatEncoder, Linear, QuantizedBlock,
    QuantizedEncoderModel, QuantizedLinear, QuantizedNorm,
};
use crate::container::{Container, DType, StoredTensor};
use crate::error::{format_err, Result};
use crate::ptf::{LayerNormAffine, PtfParams};
use crate::quant::{ChannelWeights, QuantParams};
use crate::tensor::{FloatTensor, Signedness};

pub const FLOAT_KIND: &str = "float-encoder";
pub const QUANTIZED_KIND: &str = "quantized-encoder";

fn put_f64(c: &mut Container, key: String, v: f64) {
    c.set_meta(key, format!("{v:?}"));
}

fn put_arch(c: &mut Container, a: &Architecture) {
    c.set_meta("arch.embed_dim", a.embed_dim);
    c.set_meta("arch.num_heads", a.num_heads);
    c.set_meta("arch.tokens", a.tokens);
    c.set_meta("arch.mlp_ratio", a.mlp_ratio);
    c.set_meta("arch.num_blocks", a.num_blocks);
}

fn get_arch(c: &Container) -> Result<Architecture> {
    let arch = Architecture {
        embed_dim: c.meta_parse("arch.embed_dim")?,
        num_heads: c.meta_parse("arch.num_heads")?,
        tokens: c.meta_parse("arch.tokens")?,
        mlp_ratio: c.meta_parse("arch.mlp_ratio")?,
        num_blocks: c.meta_parse("arch.num_blocks")?,
    };
    arch.validate().map_err(|e| format_err(e.to_string()))?;
    // Cap sizes so a hostile header cannot request absurd allocations.
    if arch.embed_dim > 1 << 14 || arch.tokens > 1 << 14 || arch.mlp_ratio > 64 || arch.num_blocks > 1024 {
        return Err(format_err("architecture too large"));
    }
    Ok(arch)
}

fn check_kind(c: &Container, kind: &str) -> Result<()> {
    let found = c.meta("kind")?;
    if found != kind {
        return Err(format_err(format!("expected a {kind} file, found {found:?}")));
    }
    Ok(())
}

fn float_tensor(c: &Container, name: &str, shape: &[usize]) -> Result<FloatTensor> {
    let t = c.tensor(name)?;
    if t.shape != shape {
        return Err(format_err(format!("tensor {name:?} has shape {:?}, expected {shape:?}", t.shape)));
    }
    t.to_float_tensor()
}

fn float_vec(c: &Container, name: &str, len: usize) -> Result<Vec<f64>> {
    Ok(float_tensor(c, name, &[len])?.into_data())
}

fn put_affine(c: &mut Container, prefix: &str, a: &LayerNormAffine) {
    let n = a.channels();
    c.insert(format!("{prefix}.gamma"), StoredTensor::float(vec![n], a.gamma.clone()));
    c.insert(format!("{prefix}.beta"), StoredTensor::float(vec![n], a.beta.clone()));
    put_f64(c, format!("{prefix}.epsilon"), a.epsilon);
}

fn get_affine(c: &Container, prefix: &str, channels: usize) -> Result<LayerNormAffine> {
    LayerNormAffine::new(
        float_vec(c, &format!("{prefix}.gamma"), channels)?,
        float_vec(c, &format!("{prefix}.beta"), channels)?,
        c.meta_parse(&format!("{prefix}.epsilon"))?,
    )
    .map_err(|e| format_err(format!("{prefix}: {e}")))
}

fn put_linear(c: &mut Container, prefix: &str, l: &Linear) {
    c.insert(format!("{prefix}.weight"), StoredTensor::float(l.weight.shape().to_vec(), l.weight.data().to_vec()));
    c.insert(format!("{prefix}.bias"), StoredTensor::float(vec![l.bias.len()], l.bias.clone()));
}

fn get_linear(c: &Container, prefix: &str, out: usize, inp: usize) -> Result<Linear> {
    Ok(Linear {
        weight: float_tensor(c, &format!("{prefix}.weight"), &[out, inp])?,
        bias: float_vec(c, &format!("{prefix}.bias"), out)?,
    })
}

impl FloatEncoder {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.set_meta("kind", FLOAT_KIND);
        put_arch(&mut c, &self.arch);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("block.{i}.{n}");
            put_affine(&mut c, &p("ln1"), &b.ln1);
            put_affine(&mut c, &p("ln2"), &b.ln2);
            for (name, l) in [("q", &b.q), ("k", &b.k), ("v", &b.v), ("proj", &b.proj), ("fc1", &b.fc1), ("fc2", &b.fc2)] {
                put_linear(&mut c, &p(name), l);
            }
        }
        put_affine(&mut c, "final", &self.final_norm);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        check_kind(c, FLOAT_KIND)?;
        let arch = get_arch(c)?;
        let (e, h) = (arch.embed_dim, arch.hidden_dim());
        let mut blocks = Vec::with_capacity(arch.num_blocks);
        for i in 0..arch.num_blocks {
            let p = |n: &str| format!("block.{i}.{n}");
            blocks.push(FloatBlock {
                ln1: get_affine(c, &p("ln1"), e)?,
                q: get_linear(c, &p("q"), e, e)?,
                k: get_linear(c, &p("k"), e, e)?,
                v: get_linear(c, &p("v"), e, e)?,
                proj: get_linear(c, &p("proj"), e, e)?,
                ln2: get_affine(c, &p("ln2"), e)?,
                fc1: get_linear(c, &p("fc1"), h, e)?,
                fc2: get_linear(c, &p("fc2"), e, h)?,
            });
        }
        Ok(Self { arch, blocks, final_norm: get_affine(c, "final", e)? })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

fn put_qparams(c: &mut Container, prefix: &str, q: &QuantParams) {
    put_f64(c, format!("{prefix}.scale"), q.scale);
    c.set_meta(format!("{prefix}.zero_point"), q.zero_point);
    c.set_meta(format!("{prefix}.bits"), q.bits);
    c.set_meta(format!("{prefix}.signed"), q.signedness == Signedness::Signed);
}

fn get_qparams(c: &Container, prefix: &str) -> Result<QuantParams> {
    let signed: bool = c.meta_parse(&format!("{prefix}.signed"))?;
    QuantParams::new(
        c.meta_parse(&format!("{prefix}.scale"))?,
        c.meta_parse(&format!("{prefix}.zero_point"))?,
        c.meta_parse(&format!("{prefix}.bits"))?,
        if signed { Signedness::Signed } else { Signedness::Unsigned },
    )
    .map_err(|e| format_err(format!("{prefix}: {e}")))
}

fn put_ptf(c: &mut Container, prefix: &str, p: &PtfParams) {
    put_f64(c, format!("{prefix}.scale"), p.scale);
    c.set_meta(format!("{prefix}.zero_point"), p.zero_point);
    c.set_meta(format!("{prefix}.bits"), p.bits);
    c.set_meta(format!("{prefix}.k"), p.k);
    let alpha = p.alpha.iter().map(|&a| i64::from(a)).collect();
    let t = StoredTensor::int(DType::U8, vec![p.alpha.len()], alpha).expect("alpha fits u8");
    c.insert(format!("{prefix}.alpha"), t);
}

fn get_ptf(c: &Container, prefix: &str, channels: usize) -> Result<PtfParams> {
    let name = format!("{prefix}.alpha");
    let t = c.tensor(&name)?;
    if t.shape != [channels] || t.dtype != DType::U8 {
        return Err(format_err(format!("{name} must be u8[{channels}]")));
    }
    let alpha = t.as_ints()?.iter().map(|&a| a as u8).collect();
    PtfParams::new(
        c.meta_parse(&format!("{prefix}.scale"))?,
        c.meta_parse(&format!("{prefix}.zero_point"))?,
        alpha,
        c.meta_parse(&format!("{prefix}.k"))?,
        c.meta_parse(&format!("{prefix}.bits"))?,
    )
    .map_err(|e| format_err(format!("{prefix}: {e}")))
}

fn put_qnorm(c: &mut Container, prefix: &str, n: &QuantizedNorm) {
    put_ptf(c, &format!("{prefix}.in"), &n.input);
    put_affine(c, prefix, &n.affine);
    put_qparams(c, &format!("{prefix}.out"), &n.output);
}

fn get_qnorm(c: &Container, prefix: &str, channels: usize) -> Result<QuantizedNorm> {
    Ok(QuantizedNorm {
        input: get_ptf(c, &format!("{prefix}.in"), channels)?,
        affine: get_affine(c, prefix, channels)?,
        output: get_qparams(c, &format!("{prefix}.out"))?,
    })
}

fn put_qlinear(c: &mut Container, prefix: &str, l: &QuantizedLinear) -> Result<()> {
    let w = &l.weight.codes;
    c.insert(format!("{prefix}.weight"), StoredTensor::int(DType::I8, w.shape().to_vec(), w.data().to_vec())?);
    let n = l.weight.scales.len();
    c.insert(format!("{prefix}.weight_scale"), StoredTensor::float(vec![n], l.weight.scales.clone()));
    c.insert(format!("{prefix}.bias"), StoredTensor::float(vec![l.bias.len()], l.bias.clone()));
    put_qparams(c, &format!("{prefix}.out"), &l.output);
    Ok(())
}

fn get_qlinear(c: &Container, prefix: &str, out: usize, inp: usize, weight_bits: u32) -> Result<QuantizedLinear> {
    let name = format!("{prefix}.weight");
    let t = c.tensor(&name)?;
    if t.shape != [out, inp] {
        return Err(format_err(format!("{name} has shape {:?}, expected [{out}, {inp}]", t.shape)));
    }
    Ok(QuantizedLinear {
        weight: ChannelWeights {
            codes: t.to_int_tensor(weight_bits, Signedness::Signed)?,
            scales: float_vec(c, &format!("{prefix}.weight_scale"), out)?,
        },
        bias: float_vec(c, &format!("{prefix}.bias"), out)?,
        output: get_qparams(c, &format!("{prefix}.out"))?,
    })
}

impl QuantizedEncoderModel {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.set_meta("kind", QUANTIZED_KIND);
        put_arch(&mut c, &self.config.arch);
        c.set_meta("bits", self.config.bits);
        c.set_meta("attention_mode", self.config.attention_mode);
        c.set_meta("layernorm_mode", self.config.layernorm_mode);
        c.set_meta("ptf_k", self.config.ptf_k);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("block.{i}.{n}");
            put_qnorm(&mut c, &p("ln1"), &b.ln1);
            put_qnorm(&mut c, &p("ln2"), &b.ln2);
            for (name, l) in [("q", &b.q), ("k", &b.k), ("v", &b.v), ("proj", &b.proj), ("fc1", &b.fc1), ("fc2", &b.fc2)] {
                put_qlinear(&mut c, &p(name), l)?;
            }
            put_qparams(&mut c, &p("attn"), &b.attn);
            put_qparams(&mut c, &p("context"), &b.context);
            put_qparams(&mut c, &p("gelu"), &b.gelu);
        }
        put_qnorm(&mut c, "final", &self.final_norm);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        check_kind(c, QUANTIZED_KIND)?;
        let arch = get_arch(c)?;
        let config = EncoderConfig {
            arch,
            bits: c.meta_parse::<BitTriple>("bits")?,
            attention_mode: c.meta_parse("attention_mode")?,
            layernorm_mode: c.meta_parse("layernorm_mode")?,
            ptf_k: c.meta_parse("ptf_k")?,
        };
        config.validate().map_err(|e| format_err(e.to_string()))?;
        let (e, h, wb) = (arch.embed_dim, arch.hidden_dim(), config.bits.weight);
        let mut blocks = Vec::with_capacity(arch.num_blocks);
        for i in 0..arch.num_blocks {
            let p = |n: &str| format!("block.{i}.{n}");
            blocks.push(QuantizedBlock {
                ln1: get_qnorm(c, &p("ln1"), e)?,
                q: get_qlinear(c, &p("q"), e, e, wb)?,
                k: get_qlinear(c, &p("k"), e, e, wb)?,
                v: get_qlinear(c, &p("v"), e, e, wb)?,
                attn: get_qparams(c, &p("attn"))?,
                context: get_qparams(c, &p("context"))?,
                proj: get_qlinear(c, &p("proj"), e, e, wb)?,
                ln2: get_qnorm(c, &p("ln2"), e)?,
                fc1: get_qlinear(c, &p("fc1"), h, e, wb)?,
                gelu: get_qparams(c, &p("gelu"))?,
                fc2: get_qlinear(c, &p("fc2"), e, h, wb)?,
            });
        }
        let model = Self { config, blocks, final_norm: get_qnorm(c, "final", e)? };
        model.validate().map_err(|e| format_err(e.to_string()))?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}
