//! Toy pre-norm transformer encoder with a float reference path and a
//! quantized path assembled from the integer kernels.

mod float;
mod io;
mod quantized;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tensor::FloatTensor;

pub use io::{FLOAT_KIND, QUANTIZED_KIND};
pub use float::{gelu, FloatBlock, FloatEncoder, InitScales, Linear};
pub use quantized::{
    encoder_block_forward, msa_forward, quantized_linear, quantized_qk_matmul, BlockPlan, EncoderPlan,
    LinearPlan, MsaPlan, NormPlan, QuantizedBlock, QuantizedEncoderModel, QuantizedLinear, QuantizedNorm,
    ResidualPlan,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub tokens: usize,
    pub mlp_ratio: usize,
    pub num_blocks: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { embed_dim: 64, num_heads: 4, tokens: 16, mlp_ratio: 4, num_blocks: 2 }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || self.tokens == 0 || self.mlp_ratio == 0 {
            return Err(contract("architecture extents must be non-zero"));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(contract(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.tokens, self.embed_dim]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionMode {
    /// Log-Int-Softmax with bit-shift `Attn·V`.
    #[default]
    Lis,
    /// Float Softmax on dequantized logits, uniformly quantized to the attention bit width.
    Uniform,
    /// Float attention on dequantized Q, K, V.
    Float,
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lis => "lis",
            Self::Uniform => "uniform",
            Self::Float => "float",
        })
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lis" => Ok(Self::Lis),
            "uniform" => Ok(Self::Uniform),
            "float" => Ok(Self::Float),
            _ => Err(contract(format!("unknown attention mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerNormMode {
    #[default]
    PtfInteger,
    Float,
}

impl fmt::Display for LayerNormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PtfInteger => "ptf-integer",
            Self::Float => "float",
        })
    }
}

impl FromStr for LayerNormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ptf-integer" | "ptf" => Ok(Self::PtfInteger),
            "float" => Ok(Self::Float),
            _ => Err(contract(format!("unknown LayerNorm mode {s:?}"))),
        }
    }
}

/// Weight / activation / attention bit widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitTriple {
    pub weight: u32,
    pub act: u32,
    pub attn: u32,
}

impl Default for BitTriple {
    fn default() -> Self {
        Self { weight: 8, act: 8, attn: 4 }
    }
}

impl BitTriple {
    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.weight) {
            return Err(contract(format!("weight bits {} outside 2..=8", self.weight)));
        }
        if !(2..=12).contains(&self.act) {
            return Err(contract(format!("activation bits {} outside 2..=12", self.act)));
        }
        if !(2..=8).contains(&self.attn) {
            return Err(contract(format!("attention bits {} outside 2..=8", self.attn)));
        }
        Ok(())
    }
}

impl fmt::Display for BitTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.weight, self.act, self.attn)
    }
}

impl FromStr for BitTriple {
    type Err = Error;

    /// Parses `W,A,Attn`, also accepting `/` as separator.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split([',', '/']).map(str::trim).collect();
        let [w, a, t] = parts[..] else {
            return Err(contract(format!("expected W,A,Attn bit widths, got {s:?}")));
        };
        let parse = |v: &str| v.parse::<u32>().map_err(|_| contract(format!("bad bit width {v:?}")));
        let bits = Self { weight: parse(w)?, act: parse(a)?, attn: parse(t)? };
        bits.validate()?;
        Ok(bits)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub arch: Architecture,
    pub bits: BitTriple,
    pub attention_mode: AttentionMode,
    pub layernorm_mode: LayerNormMode,
    pub ptf_k: u8,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::default(),
            bits: BitTriple::default(),
            attention_mode: AttentionMode::Lis,
            layernorm_mode: LayerNormMode::PtfInteger,
            ptf_k: crate::ptf::DEFAULT_K,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.bits.validate()?;
        if self.ptf_k > 8 {
            return Err(contract(format!("K = {} outside 0..=8", self.ptf_k)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scope {
    Block(usize),
    Final,
}

/// Activation sites visited by the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SiteKind {
    Ln1In,
    Ln1Out,
    Q,
    K,
    V,
    Attn,
    Context,
    Proj,
    Ln2In,
    Ln2Out,
    Fc1,
    Gelu,
    Fc2,
    NormIn,
    NormOut,
}

impl SiteKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Ln1In => "ln1_in",
            Self::Ln1Out => "ln1_out",
            Self::Q => "q",
            Self::K => "k",
            Self::V => "v",
            Self::Attn => "attn",
            Self::Context => "context",
            Self::Proj => "proj",
            Self::Ln2In => "ln2_in",
            Self::Ln2Out => "ln2_out",
            Self::Fc1 => "fc1",
            Self::Gelu => "gelu",
            Self::Fc2 => "fc2",
            Self::NormIn => "norm_in",
            Self::NormOut => "norm_out",
        }
    }

    pub fn is_layernorm_input(&self) -> bool {
        matches!(self, Self::Ln1In | Self::Ln2In | Self::NormIn)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Site {
    pub scope: Scope,
    pub kind: SiteKind,
}

impl Site {
    pub fn block(i: usize, kind: SiteKind) -> Self {
        Self { scope: Scope::Block(i), kind }
    }

    pub fn final_norm(kind: SiteKind) -> Self {
        Self { scope: Scope::Final, kind }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.scope {
            Scope::Block(i) => write!(f, "block.{i}.{}", self.kind.name()),
            Scope::Final => write!(f, "final.{}", self.kind.name()),
        }
    }
}

/// Receives float activations during a reference forward pass.
///
/// Attention probabilities arrive once per head as `[L, L]` tensors.
pub trait ActivationSink {
    fn record(&mut self, site: Site, x: &FloatTensor);
}

/// Sink that ignores everything.
pub struct NoSink;

impl ActivationSink for NoSink {
    fn record(&mut self, _: Site, _: &FloatTensor) {}
}

impl<F: FnMut(Site, &FloatTensor)> ActivationSink for F {
    fn record(&mut self, site: Site, x: &FloatTensor) {
        self(site, x)
    }
}

/// Anything that maps an `[L, C]` input to an `[L, C]` output.
pub trait Encoder {
    fn forward(&self, x: &FloatTensor) -> Result<FloatTensor>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_triple_parsing() {
        assert_eq!("8,8,4".parse::<BitTriple>().unwrap(), BitTriple { weight: 8, act: 8, attn: 4 });
        assert_eq!("8/8/8".parse::<BitTriple>().unwrap().attn, 8);
        assert!("8,8".parse::<BitTriple>().is_err());
        assert!("8,8,x".parse::<BitTriple>().is_err());
        assert!("8,8,1".parse::<BitTriple>().is_err());
        assert!("32,8,4".parse::<BitTriple>().is_err());
    }

    #[test]
    fn site_names() {
        assert_eq!(Site::block(1, SiteKind::Ln2In).to_string(), "block.1.ln2_in");
        assert_eq!(Site::final_norm(SiteKind::NormOut).to_string(), "final.norm_out");
    }

    #[test]
    fn modes_round_trip_through_strings() {
        for m in [AttentionMode::Lis, AttentionMode::Uniform, AttentionMode::Float] {
            assert_eq!(m.to_string().parse::<AttentionMode>().unwrap(), m);
        }
        for m in [LayerNormMode::PtfInteger, LayerNormMode::Float] {
            assert_eq!(m.to_string().parse::<LayerNormMode>().unwrap(), m);
        }
        let arch = Architecture { embed_dim: 10, num_heads: 4, ..Default::default() };
        assert!(arch.validate().is_err());
    }
}
