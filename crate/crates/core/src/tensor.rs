//! Dense row-major tensors.
//!
//! [`IntTensor`] is the only activation carrier on the quantized path. Each
//! tensor declares a bit width and a signedness tag and every element is
//! checked against them on construction.

use serde::{Deserialize, Serialize};

use crate::error::{contract, dimension, Error, Result};
use crate::trace;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Signedness {
    Signed,
    Unsigned,
}

fn element_count(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| dimension(format!("shape {shape:?} overflows usize")))
}

/// Inclusive code range for a bit width and signedness.
pub fn code_range(bits: u32, signedness: Signedness) -> (i64, i64) {
    match signedness {
        Signedness::Unsigned => (0, ((1u128 << bits) - 1).min(i64::MAX as u128) as i64),
        Signedness::Signed => {
            if bits >= 64 {
                (i64::MIN, i64::MAX)
            } else {
                (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntTensor {
    shape: Vec<usize>,
    data: Vec<i64>,
    bits: u32,
    signedness: Signedness,
}

impl IntTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i64>, bits: u32, signedness: Signedness) -> Result<Self> {
        if !(1..=64).contains(&bits) {
            return Err(contract(format!("bit width {bits} outside 1..=64")));
        }
        let n = element_count(&shape)?;
        if n != data.len() {
            return Err(dimension(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        let (lo, hi) = code_range(bits, signedness);
        if let Some(v) = data.iter().find(|&&v| v < lo || v > hi) {
            return Err(contract(format!(
                "value {v} does not fit {bits}-bit {signedness:?} code range [{lo}, {hi}]"
            )));
        }
        Ok(Self { shape, data, bits, signedness })
    }

    /// A 64-bit signed accumulator tensor.
    pub fn accumulator(shape: Vec<usize>, data: Vec<i64>) -> Result<Self> {
        Self::new(shape, data, 64, Signedness::Signed)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<i64> {
        self.data
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn signedness(&self) -> Signedness {
        self.signedness
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the innermost axis (channels for activations).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Iterate rows along the innermost axis.
    pub fn rows(&self) -> std::slice::ChunksExact<'_, i64> {
        self.data.chunks_exact(self.last_dim().max(1))
    }

    pub fn row(&self, i: usize) -> &[i64] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn num_rows(&self) -> usize {
        self.data.len().checked_div(self.last_dim()).unwrap_or(0)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data, self.bits, self.signedness)
    }

    /// Columns `[start, start + width)` of a 2-D tensor.
    pub fn column_slice(&self, start: usize, width: usize) -> Result<Self> {
        let [rows, cols] = self.shape[..] else {
            return Err(dimension("column_slice needs a 2-D tensor"));
        };
        if start + width > cols {
            return Err(dimension(format!("columns {start}..{} out of {cols}", start + width)));
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * cols + start..r * cols + start + width]);
        }
        Ok(Self { shape: vec![rows, width], data, bits: self.bits, signedness: self.signedness })
    }

    pub fn transpose2(&self) -> Result<Self> {
        let [rows, cols] = self.shape[..] else {
            return Err(dimension("transpose2 needs a 2-D tensor"));
        };
        let mut data = vec![0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = self.data[r * cols + c];
            }
        }
        Ok(Self { shape: vec![cols, rows], data, bits: self.bits, signedness: self.signedness })
    }
}

/// Real-valued tensor; only finite values are admitted.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl FloatTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = element_count(&shape)?;
        if n != data.len() {
            return Err(dimension(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(contract(format!("non-finite value {v} in float tensor")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let n = element_count(&shape)?;
        Self::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.last_dim().max(1))
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn num_rows(&self) -> usize {
        self.data.len().checked_div(self.last_dim()).unwrap_or(0)
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Result<Self> {
        trace::record_float(self.data.len());
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_with(&self, other: &Self, mut f: impl FnMut(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(dimension(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        trace::record_float(self.data.len());
        Self::new(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    /// Columns `[start, start + width)` of a 2-D tensor.
    pub fn column_slice(&self, start: usize, width: usize) -> Result<Self> {
        let [rows, cols] = self.shape[..] else {
            return Err(dimension("column_slice needs a 2-D tensor"));
        };
        if start + width > cols {
            return Err(dimension(format!("columns {start}..{} out of {cols}", start + width)));
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * cols + start..r * cols + start + width]);
        }
        Ok(Self { shape: vec![rows, width], data })
    }
}

/// Integer codes with the real-valued scale that dequantizes them:
/// `x ≈ scale · (codes − zero_point)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledInt {
    pub codes: IntTensor,
    pub scale: f64,
    pub zero_point: i64,
}

impl ScaledInt {
    pub fn new(codes: IntTensor, scale: f64, zero_point: i64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(contract(format!("scale must be positive and finite, got {scale}")));
        }
        Ok(Self { codes, scale, zero_point })
    }

    pub fn dequantize(&self) -> FloatTensor {
        trace::record_float(self.codes.len());
        let data = self
            .codes
            .data()
            .iter()
            .map(|&q| self.scale * (q - self.zero_point) as f64)
            .collect();
        FloatTensor { shape: self.codes.shape().to_vec(), data }
    }
}

/// Exact integer matrix product `a · b` of 2-D tensors into a 64-bit
/// accumulator. Operands must be codes of at most 16 bits; any overflow of
/// the accumulator is reported rather than wrapped.
pub fn widen_matmul(a: &IntTensor, b: &IntTensor) -> Result<IntTensor> {
    let ([m, k], [k2, n]) = (a.shape(), b.shape()) else {
        return Err(dimension(format!(
            "widen_matmul needs 2-D operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    };
    let (m, k, k2, n) = (*m, *k, *k2, *n);
    if k != k2 {
        return Err(dimension(format!("inner extents {k} and {k2} differ")));
    }
    if a.bits() > 16 || b.bits() > 16 {
        return Err(contract(format!(
            "widen_matmul operands must be ≤16-bit codes, got {} and {}",
            a.bits(),
            b.bits()
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0i64; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc: i64 = 0;
            for (p, &av) in arow.iter().enumerate() {
                acc = av
                    .checked_mul(bd[p * n + j])
                    .and_then(|t| acc.checked_add(t))
                    .ok_or(Error::Overflow("widen_matmul"))?;
            }
            out[i * n + j] = acc;
        }
    }
    IntTensor::accumulator(vec![m, n], out)
}

fn shl_checked(v: i64, k: i32) -> Result<i64> {
    if k < 0 {
        return Err(contract(format!("negative shift {k}")));
    }
    if v == 0 {
        return Ok(0);
    }
    if k >= 63 {
        return Err(Error::Overflow("shift_left"));
    }
    v.checked_mul(1i64 << k).ok_or(Error::Overflow("shift_left"))
}

/// Multiply every element by `2^k` exactly.
pub fn shift_left(x: &IntTensor, k: i32) -> Result<IntTensor> {
    let data = x.data().iter().map(|&v| shl_checked(v, k)).collect::<Result<Vec<_>>>()?;
    IntTensor::accumulator(x.shape().to_vec(), data)
}

/// Multiply element `i` by `2^{k[i]}` exactly.
pub fn shift_left_each(x: &IntTensor, k: &[i32]) -> Result<IntTensor> {
    if k.len() != x.len() {
        return Err(dimension(format!("{} shifts for {} elements", k.len(), x.len())));
    }
    let data = x
        .data()
        .iter()
        .zip(k)
        .map(|(&v, &s)| shl_checked(v, s))
        .collect::<Result<Vec<_>>>()?;
    IntTensor::accumulator(x.shape().to_vec(), data)
}
