//! Integer-only Softmax with log2-coded output and the bit-shift
//! attention·value product.

use serde::{Deserialize, Serialize};

use crate::error::{contract, dimension, Error, Result};
use crate::numeric::{div_round_half_even, round_to_i64};
use crate::quant::QuantParams;
use crate::tensor::{FloatTensor, IntTensor, ScaledInt, Signedness};
use crate::trace;

/// Coefficients of `L(p) = a(p + b)² + c ≈ exp(p)` on `p ∈ (−ln2, 0]` and
/// the shift precision `n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IExpConstants {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub n: u32,
}

impl Default for IExpConstants {
    fn default() -> Self {
        Self { a: 0.3585, b: 1.353, c: 0.344, n: 30 }
    }
}

impl IExpConstants {
    pub fn polynomial(&self, p: f64) -> f64 {
        self.a * (p + self.b) * (p + self.b) + self.c
    }
}

/// i-exp constants folded for a fixed input scale. Applying the plan is
/// pure integer arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IExpPlan {
    pub q_ln2: i64,
    pub q_b: i64,
    pub q_c: i64,
    pub n: u32,
}

impl IExpPlan {
    pub fn new(scale: f64, consts: &IExpConstants) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(contract(format!("i-exp input scale must be positive, got {scale}")));
        }
        if consts.n > 62 {
            return Err(contract(format!("shift precision n = {} exceeds 62", consts.n)));
        }
        trace::record_float(6);
        let q_ln2 = (-std::f64::consts::LN_2 / scale).floor() as i64;
        if q_ln2 == 0 {
            return Err(Error::Calibration(format!("scale {scale} too coarse for i-exp")));
        }
        let q_b = (consts.b / scale).floor() as i64;
        let q_c = (consts.c / (consts.a * scale * scale)).floor() as i64;
        // The polynomial peaks at q_p = 0; very fine input scales lower the
        // shift precision so that `peak << n` stays inside 63 bits.
        let peak = i128::from(q_b) * i128::from(q_b) + i128::from(q_c);
        let peak_bits = 128 - peak.leading_zeros();
        if peak_bits > 62 {
            return Err(Error::Calibration(format!("scale {scale} too fine for i-exp")));
        }
        let n = consts.n.min(62 - peak_bits);
        Ok(Self { q_ln2, q_b, q_c, n })
    }

    /// Output scale `a·s²/2^n` attached to the integer result.
    pub fn output_scale(&self, scale: f64, consts: &IExpConstants) -> f64 {
        consts.a * scale * scale / f64::from(self.n).exp2()
    }

    /// `i-exp(q)` for a non-positive code `q`.
    pub fn apply(&self, q: i64) -> Result<i64> {
        if q > 0 {
            return Err(contract(format!("i-exp input {q} is positive")));
        }
        let floor = (self.n as i64).checked_mul(self.q_ln2).ok_or(Error::Overflow("i-exp clamp"))?;
        let q = q.max(floor);
        // Both operands are non-positive; truncating division gives z ≥ 0 and
        // leaves q_p in (q_ln2, 0].
        let z = q / self.q_ln2;
        let q_p = q - z * self.q_ln2;
        let base = q_p + self.q_b;
        let q_l = base
            .checked_mul(base)
            .and_then(|sq| sq.checked_add(self.q_c))
            .ok_or(Error::Overflow("i-exp polynomial"))?;
        let shift = self.n as i64 - z;
        debug_assert!((0..=self.n as i64).contains(&shift));
        if q_l == 0 {
            return Ok(0);
        }
        if q_l.leading_zeros() as i64 <= shift {
            return Err(Error::Overflow("i-exp output shift"));
        }
        Ok(q_l << shift)
    }
}

/// Integer exponential of non-positive codes with scale `s`.
pub fn i_exp(q: &IntTensor, scale: f64, consts: &IExpConstants) -> Result<ScaledInt> {
    let plan = IExpPlan::new(scale, consts)?;
    let data = q.data().iter().map(|&v| plan.apply(v)).collect::<Result<Vec<_>>>()?;
    ScaledInt::new(
        IntTensor::accumulator(q.shape().to_vec(), data)?,
        plan.output_scale(scale, consts),
        0,
    )
}

/// Integer log2 by most-significant-bit inspection: `M + bit_{M−1}(q)`.
pub fn i_log2(q: i64) -> Result<u32> {
    if q <= 0 {
        return Err(contract(format!("i_log2 needs a positive input, got {q}")));
    }
    let m = 63 - q.leading_zeros();
    let chi = if m == 0 { 0 } else { ((q >> (m - 1)) & 1) as u32 };
    Ok(m + chi)
}

/// Log2-coded attention. Each stored code is `N − Attn_Q` with `N = 2^b − 1`,
/// at scale `1/2^N`, so the represented probability is `2^{−Attn_Q}`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogAttnCodes {
    pub codes: IntTensor,
    pub bits: u32,
}

impl LogAttnCodes {
    pub fn new(codes: IntTensor, bits: u32) -> Result<Self> {
        if !(2..=16).contains(&bits) || codes.bits() != bits || codes.signedness() != Signedness::Unsigned {
            return Err(contract("attention codes must be unsigned b-bit codes"));
        }
        Ok(Self { codes, bits })
    }

    /// `N = 2^b − 1`.
    pub fn n(&self) -> i64 {
        (1i64 << self.bits) - 1
    }

    /// `Attn_Q` values (the exponent of the represented probability).
    pub fn exponents(&self) -> Vec<i64> {
        self.codes.data().iter().map(|&c| self.n() - c).collect()
    }

    pub fn dequantize(&self) -> FloatTensor {
        trace::record_float(self.codes.len());
        let n = self.n();
        let data = self.codes.data().iter().map(|&c| (-((n - c) as f64)).exp2()).collect();
        FloatTensor::new(self.codes.shape().to_vec(), data).expect("finite")
    }
}

/// Log-Int-Softmax with the input scale folded in advance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LisPlan {
    pub iexp: IExpPlan,
    pub bits: u32,
}

impl LisPlan {
    pub fn new(scale: f64, bits: u32, consts: &IExpConstants) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(contract(format!("attention bit width {bits} outside 2..=16")));
        }
        Ok(Self { iexp: IExpPlan::new(scale, consts)?, bits })
    }

    /// Stored codes `N − clip(I-Log2(⌊Σ q_exp / q_exp⌉), 0, N)` for one row.
    pub fn apply_row(&self, row: &[i64]) -> Result<Vec<i64>> {
        let max = *row.iter().max().ok_or_else(|| dimension("softmax over an empty row"))?;
        let exps = row
            .iter()
            .map(|&q| {
                let shifted = q.checked_sub(max).ok_or(Error::Overflow("softmax max subtraction"))?;
                // mass below the representable precision floors at one unit
                Ok(self.iexp.apply(shifted)?.max(1))
            })
            .collect::<Result<Vec<i64>>>()?;
        let sum: i128 = exps.iter().map(|&e| e as i128).sum();
        let n = (1i64 << self.bits) - 1;
        exps.iter()
            .map(|&e| {
                let rev = div_round_half_even(sum, e as i128);
                let rev = i64::try_from(rev).map_err(|_| Error::Overflow("softmax reciprocal"))?;
                let attn_q = i64::from(i_log2(rev)?).clamp(0, n);
                Ok(n - attn_q)
            })
            .collect()
    }
}

/// Log-Int-Softmax over every row (innermost axis) of `q` at scale `s`.
pub fn log_int_softmax(q: &IntTensor, scale: f64, bits: u32, consts: &IExpConstants) -> Result<LogAttnCodes> {
    let plan = LisPlan::new(scale, bits, consts)?;
    let mut data = Vec::with_capacity(q.len());
    for row in q.rows() {
        data.extend(plan.apply_row(row)?);
    }
    LogAttnCodes::new(IntTensor::new(q.shape().to_vec(), data, bits, Signedness::Unsigned)?, bits)
}

/// Reference log2 quantization of probabilities: `clip(⌊−log2 a⌉, 0, 2^b − 1)`.
pub fn quantize_attention_log2(attn: &FloatTensor, bits: u32) -> Result<LogAttnCodes> {
    if !(2..=16).contains(&bits) {
        return Err(contract(format!("attention bit width {bits} outside 2..=16")));
    }
    if let Some(v) = attn.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(contract(format!("attention value {v} outside [0, 1]")));
    }
    trace::record_float(attn.len());
    let n = (1i64 << bits) - 1;
    let data = attn
        .data()
        .iter()
        .map(|&a| {
            let e = if a == 0.0 { n } else { round_to_i64(-a.log2()).clamp(0, n) };
            n - e
        })
        .collect();
    LogAttnCodes::new(IntTensor::new(attn.shape().to_vec(), data, bits, Signedness::Unsigned)?, bits)
}

/// Largest shift base kept static; wider code books fall back to the row's
/// deepest exponent so the shifted terms stay inside 64 bits.
const MAX_STATIC_SHIFT: i64 = 31;

/// Integer part of the bit-shift product for one attention row:
/// `Σ_j (V_j − zp) << (E − Attn_Q[j])`, returning the sums and `E`.
///
/// `E = N` for code books up to 5 bits; beyond that `E` is the row's
/// largest exponent.
pub fn attn_value_accumulate(exponents: &[i64], n: i64, v: &IntTensor, v_zero_point: i64) -> Result<(Vec<i64>, u32)> {
    let [rows, d] = v.shape()[..] else {
        return Err(dimension("values must be a 2-D [J, d] tensor"));
    };
    if rows != exponents.len() {
        return Err(dimension(format!("{} attention weights for {rows} value rows", exponents.len())));
    }
    let base = if n <= MAX_STATIC_SHIFT { n } else { exponents.iter().copied().max().unwrap_or(0) };
    let mut acc = vec![0i64; d];
    for (j, &e) in exponents.iter().enumerate() {
        if !(0..=n).contains(&e) {
            return Err(contract(format!("attention exponent {e} outside [0, {n}]")));
        }
        let shift = base - e;
        if shift >= 63 {
            return Err(Error::Overflow("attention shift"));
        }
        for (a, &vq) in acc.iter_mut().zip(v.row(j)) {
            let centered = vq - v_zero_point;
            let term = centered.checked_mul(1i64 << shift).ok_or(Error::Overflow("attention shift"))?;
            *a = a.checked_add(term).ok_or(Error::Overflow("attention accumulate"))?;
        }
    }
    Ok((acc, base as u32))
}

/// `Attn·V` for one attention row against `V_Q` (`[J, d]`), as integers at
/// scale `s_V / 2^E`.
pub fn attn_value_product(attn: &LogAttnCodes, v: &IntTensor, v_params: &QuantParams) -> Result<ScaledInt> {
    let exps = attn.exponents();
    let (acc, base) = attn_value_accumulate(&exps, attn.n(), v, v_params.zero_point)?;
    let d = acc.len();
    trace::record_float(1);
    ScaledInt::new(IntTensor::accumulator(vec![d], acc)?, v_params.scale / f64::from(base).exp2(), 0)
}

/// Numerically stable float Softmax over one row.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    trace::record_float(row.len() * 3);
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn softmax(x: &FloatTensor) -> Result<FloatTensor> {
    let data = x.rows().flat_map(softmax_row).collect();
    FloatTensor::new(x.shape().to_vec(), data)
}
