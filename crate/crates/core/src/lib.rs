//! Integer-only post-training quantization kernels for transformer
//! inference.
//!
//! - [`quant`]: uniform affine and log2 quantizers with MinMax calibration
//! - [`ptf`]: Power-of-Two-Factor LayerNorm input quantization and integer LayerNorm
//! - [`lis`]: integer exponential, integer log2, Log-Int-Softmax and the bit-shift `Attn·V`
//! - [`model`]: a toy encoder with matched float and quantized forward passes
//! - [`calibrate`], [`report`], [`data`]: calibration, evaluation and diagnostics
//! - [`container`]: the on-disk tensor container used for models and datasets

pub mod calibrate;
pub mod container;
pub mod data;
pub mod error;
pub mod lis;
pub mod model;
pub mod numeric;
pub mod ptf;
pub mod quant;
pub mod report;
pub mod tensor;
pub mod trace;

pub use error::{Error, Result};
pub use tensor::{FloatTensor, IntTensor, ScaledInt, Signedness};
