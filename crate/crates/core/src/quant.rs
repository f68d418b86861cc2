//! Uniform affine and log2 quantizers with MinMax calibration.

use serde::{Deserialize, Serialize};

use crate::error::{contract, dimension, Error, Result};
use crate::numeric::{round_to_i64, shift_right_round};
use crate::tensor::{code_range, FloatTensor, IntTensor, Signedness};
use crate::trace;

/// Layer-wise affine quantization parameters: `x ≈ scale · (q − zero_point)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i64,
    pub bits: u32,
    pub signedness: Signedness,
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: i64, bits: u32, signedness: Signedness) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(contract(format!("code bit width {bits} outside 2..=16")));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(contract(format!("scale must be positive, got {scale}")));
        }
        let (lo, hi) = code_range(bits, signedness);
        if zero_point < lo || zero_point > hi {
            return Err(contract(format!("zero point {zero_point} outside [{lo}, {hi}]")));
        }
        if signedness == Signedness::Signed && zero_point != 0 {
            return Err(contract("signed (symmetric) parameters require zero point 0"));
        }
        Ok(Self { scale, zero_point, bits, signedness })
    }

    /// Asymmetric parameters from a lower and upper bound.
    ///
    /// `s = (u − l)/(2^b − 1)` and `zp = clip(⌊−l/s⌉, 0, 2^b − 1)`. When
    /// `u == l` the scale falls back to 1 and `zp = clip(⌊−l⌉)`.
    pub fn from_bounds(lower: f64, upper: f64, bits: u32) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite()) || upper < lower {
            return Err(Error::Calibration(format!("invalid bounds [{lower}, {upper}]")));
        }
        if !(2..=16).contains(&bits) {
            return Err(contract(format!("code bit width {bits} outside 2..=16")));
        }
        let levels = ((1u64 << bits) - 1) as f64;
        let qmax = (1i64 << bits) - 1;
        let (scale, zp) = if upper == lower {
            (1.0, round_to_i64(-lower))
        } else {
            // −l/s written as −l·(2^b−1)/(u−l) so that exact halves stay exact.
            ((upper - lower) / levels, round_to_i64(-lower * levels / (upper - lower)))
        };
        Self::new(scale, zp.clamp(0, qmax), bits, Signedness::Unsigned)
    }

    /// Symmetric signed parameters with `scale = max_abs/(2^{b−1} − 1)`.
    pub fn symmetric(max_abs: f64, bits: u32) -> Result<Self> {
        if !(max_abs.is_finite() && max_abs >= 0.0) {
            return Err(Error::Calibration(format!("invalid max |x| {max_abs}")));
        }
        let levels = ((1i64 << (bits - 1)) - 1) as f64;
        let scale = if max_abs == 0.0 { 1.0 } else { max_abs / levels };
        Self::new(scale, 0, bits, Signedness::Signed)
    }

    pub fn qmin(&self) -> i64 {
        match self.signedness {
            Signedness::Unsigned => 0,
            // symmetric range keeps −2^{b−1} unused
            Signedness::Signed => -((1i64 << (self.bits - 1)) - 1),
        }
    }

    pub fn qmax(&self) -> i64 {
        match self.signedness {
            Signedness::Unsigned => (1i64 << self.bits) - 1,
            Signedness::Signed => (1i64 << (self.bits - 1)) - 1,
        }
    }

    pub fn quantize_value(&self, x: f64) -> i64 {
        (round_to_i64(x / self.scale).saturating_add(self.zero_point)).clamp(self.qmin(), self.qmax())
    }

    pub fn dequantize_value(&self, q: i64) -> f64 {
        self.scale * (q - self.zero_point) as f64
    }
}

/// Running (min, max) over calibration samples. Merging is associative.
#[derive(Clone, Debug, PartialEq)]
pub struct MinMaxObserver {
    min: f64,
    max: f64,
    count: usize,
}

impl Default for MinMaxObserver {
    fn default() -> Self {
        Self { min: f64::INFINITY, max: f64::NEG_INFINITY, count: 0 }
    }
}

impl MinMaxObserver {
    pub fn observe(&mut self, values: &[f64]) {
        for &v in values {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
        self.count += values.len();
    }

    pub fn merge(&mut self, other: &Self) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.count += other.count;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn bounds(&self) -> Option<(f64, f64)> {
        (self.count > 0).then_some((self.min, self.max))
    }

    pub fn finalize(&self, bits: u32) -> Result<QuantParams> {
        let (l, u) = self
            .bounds()
            .ok_or_else(|| Error::Calibration("no samples observed".into()))?;
        QuantParams::from_bounds(l, u, bits)
    }

    /// Symmetric parameters from the largest magnitude observed.
    pub fn finalize_symmetric(&self, bits: u32) -> Result<QuantParams> {
        let (l, u) = self
            .bounds()
            .ok_or_else(|| Error::Calibration("no samples observed".into()))?;
        QuantParams::symmetric(l.abs().max(u.abs()), bits)
    }
}

/// MinMax calibration over a stream of sample tensors.
pub fn calibrate_minmax<'a>(
    samples: impl IntoIterator<Item = &'a FloatTensor>,
    bits: u32,
) -> Result<QuantParams> {
    let mut obs = MinMaxObserver::default();
    for s in samples {
        obs.observe(s.data());
    }
    obs.finalize(bits)
}

/// `clip(⌊x/s⌉ + zp, qmin, qmax)` elementwise.
pub fn quantize_uniform(x: &FloatTensor, p: &QuantParams) -> IntTensor {
    trace::record_float(x.len());
    let data = x.data().iter().map(|&v| p.quantize_value(v)).collect();
    IntTensor::new(x.shape().to_vec(), data, p.bits, p.signedness)
        .expect("quantized codes lie in the code range by construction")
}

/// `s · (q − zp)` elementwise.
pub fn dequantize_uniform(q: &IntTensor, p: &QuantParams) -> FloatTensor {
    trace::record_float(q.len());
    let data = q.data().iter().map(|&v| p.dequantize_value(v)).collect();
    FloatTensor::new(q.shape().to_vec(), data).expect("finite by construction")
}

/// Normalizer for signed log2 quantization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Log2Params {
    pub max_abs: f64,
    pub bits: u32,
}

impl Log2Params {
    pub fn new(max_abs: f64, bits: u32) -> Result<Self> {
        if !(max_abs.is_finite() && max_abs > 0.0) {
            return Err(contract(format!("log2 normalizer must be positive, got {max_abs}")));
        }
        if !(2..=16).contains(&bits) {
            return Err(contract(format!("code bit width {bits} outside 2..=16")));
        }
        Ok(Self { max_abs, bits })
    }

    pub fn max_exponent(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }
}

/// `sign(x) · clip(⌊−log2(|x|/max|x|)⌉, 0, 2^{b−1} − 1)`.
///
/// Zero maps to the deepest exponent. Exponent 0 carries no sign, so both
/// `±max_abs` code to 0 and dequantize to `+max_abs`.
pub fn quantize_log2_signed(x: &FloatTensor, p: &Log2Params) -> IntTensor {
    trace::record_float(x.len());
    let emax = p.max_exponent();
    let data = x
        .data()
        .iter()
        .map(|&v| {
            if v == 0.0 {
                return emax;
            }
            let e = round_to_i64(-(v.abs() / p.max_abs).log2()).clamp(0, emax);
            if v < 0.0 {
                -e
            } else {
                e
            }
        })
        .collect();
    IntTensor::new(x.shape().to_vec(), data, p.bits, Signedness::Signed)
        .expect("exponents are clipped into range")
}

pub fn dequantize_log2_signed(q: &IntTensor, p: &Log2Params) -> FloatTensor {
    trace::record_float(q.len());
    let data = q
        .data()
        .iter()
        .map(|&c| {
            let mag = p.max_abs * (-(c.abs() as f64)).exp2();
            if c < 0 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    FloatTensor::new(q.shape().to_vec(), data).expect("finite by construction")
}

/// Weights quantized symmetrically with one scale per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelWeights {
    /// `[out, in]` signed codes.
    pub codes: IntTensor,
    pub scales: Vec<f64>,
}

impl ChannelWeights {
    pub fn dequantize(&self) -> FloatTensor {
        trace::record_float(self.codes.len());
        let cols = self.codes.last_dim();
        let data = self
            .codes
            .data()
            .iter()
            .enumerate()
            .map(|(i, &q)| q as f64 * self.scales[i / cols])
            .collect();
        FloatTensor::new(self.codes.shape().to_vec(), data).expect("finite")
    }
}

/// Symmetric channel-wise MinMax quantization of a `[out, in]` weight.
pub fn quantize_weights_per_channel(w: &FloatTensor, bits: u32) -> Result<ChannelWeights> {
    let [out, inp] = w.shape()[..] else {
        return Err(dimension(format!("weight must be 2-D, got {:?}", w.shape())));
    };
    trace::record_float(w.len());
    let mut scales = Vec::with_capacity(out);
    let mut codes = Vec::with_capacity(out * inp);
    for r in 0..out {
        let row = &w.data()[r * inp..(r + 1) * inp];
        let max_abs = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let p = QuantParams::symmetric(max_abs, bits)?;
        codes.extend(row.iter().map(|&v| p.quantize_value(v)));
        scales.push(p.scale);
    }
    Ok(ChannelWeights {
        codes: IntTensor::new(vec![out, inp], codes, bits, Signedness::Signed)?,
        scales,
    })
}

/// Fixed-point multiplier `m · 2^{−shift}` approximating a positive real
/// ratio, applied with integer multiply and rounding shift.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Requantizer {
    pub multiplier: i64,
    pub shift: u32,
}

const MULTIPLIER_BITS: i32 = 31;
const MAX_SHIFT: i32 = 100;

impl Requantizer {
    pub fn from_ratio(ratio: f64) -> Result<Self> {
        Ok(Self::shared(&[ratio])?[0])
    }

    /// Multipliers for several ratios sharing a single shift, sized so the
    /// largest ratio keeps `MULTIPLIER_BITS` of precision.
    pub fn shared(ratios: &[f64]) -> Result<Vec<Self>> {
        trace::record_float(ratios.len());
        if let Some(r) = ratios.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
            return Err(contract(format!("requantization ratio must be finite and ≥ 0, got {r}")));
        }
        let max = ratios.iter().cloned().fold(0.0f64, f64::max);
        if max == 0.0 {
            return Ok(ratios.iter().map(|_| Self { multiplier: 0, shift: 0 }).collect());
        }
        let exp = max.log2().floor() as i32;
        let shift = (MULTIPLIER_BITS - 1 - exp).clamp(0, MAX_SHIFT) as u32;
        let scale = (shift as f64).exp2();
        ratios
            .iter()
            .map(|&r| {
                let m = round_to_i64(r * scale);
                if m >= 1i64 << 62 {
                    return Err(Error::Overflow("requantizer multiplier"));
                }
                Ok(Self { multiplier: m, shift })
            })
            .collect()
    }

    /// `round(acc · ratio)`.
    pub fn apply(&self, acc: i64) -> i64 {
        self.apply_with_shift(acc, 0)
    }

    /// `round(acc · ratio · 2^{−extra})`.
    pub fn apply_with_shift(&self, acc: i64, extra: u32) -> i64 {
        let prod = acc as i128 * self.multiplier as i128;
        shift_right_round(prod, self.shift + extra) as i64
    }

    pub fn ratio(&self) -> f64 {
        self.multiplier as f64 / (self.shift as f64).exp2()
    }
}
