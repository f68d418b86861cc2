//! Power-of-Two-Factor quantization of LayerNorm inputs and integer
//! LayerNorm inference.
//!
//! A LayerNorm input is quantized with one layer-wise `(s, zp)` pair plus a
//! per-channel exponent `α_c ∈ [0, K]`; channel `c` uses the divisor
//! `2^{α_c}·s`. Shifting the codes left by `α_c` puts every channel on the
//! common grid `s`, so the token statistics come out of integer sums.

use serde::{Deserialize, Serialize};

use crate::error::{contract, dimension, Error, Result};
use crate::numeric::{isqrt, round_to_i64, shift_right_round};
use crate::quant::QuantParams;
use crate::tensor::{FloatTensor, IntTensor, Signedness};
use crate::trace;

/// Default `K`: accuracy saturates at three extra powers of two.
pub const DEFAULT_K: u8 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PtfParams {
    /// Layer-wise scale, already divided by `2^K`.
    pub scale: f64,
    pub zero_point: i64,
    pub alpha: Vec<u8>,
    pub k: u8,
    pub bits: u32,
}

impl PtfParams {
    pub fn new(scale: f64, zero_point: i64, alpha: Vec<u8>, k: u8, bits: u32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(contract(format!("PTF scale must be positive, got {scale}")));
        }
        if !(2..=16).contains(&bits) {
            return Err(contract(format!("code bit width {bits} outside 2..=16")));
        }
        if k > 16 {
            return Err(contract(format!("K = {k} is unreasonably large")));
        }
        if !(0..=(1i64 << bits) - 1).contains(&zero_point) {
            return Err(contract(format!("zero point {zero_point} outside code range")));
        }
        if let Some(a) = alpha.iter().find(|&&a| a > k) {
            return Err(contract(format!("alpha {a} exceeds K = {k}")));
        }
        Ok(Self { scale, zero_point, alpha, k, bits })
    }

    pub fn channels(&self) -> usize {
        self.alpha.len()
    }

    pub fn qmax(&self) -> i64 {
        (1i64 << self.bits) - 1
    }

    /// Real step of channel `c`: `2^{α_c}·s`.
    pub fn channel_step(&self, c: usize) -> f64 {
        self.scale * f64::from(1u32 << self.alpha[c])
    }

    fn quantize_with_step(&self, x: f64, step: f64) -> i64 {
        (round_to_i64(x / step).saturating_add(self.zero_point)).clamp(0, self.qmax())
    }

    /// Parameters with `K = 0` semantics for the same data: layer-wise
    /// quantization with the full-range scale `2^K·s`.
    pub fn layerwise_equivalent(&self) -> Result<QuantParams> {
        QuantParams::new(
            self.scale * f64::from(1u32 << self.k),
            self.zero_point,
            self.bits,
            Signedness::Unsigned,
        )
    }
}

/// LayerNorm affine parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNormAffine {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub epsilon: f64,
}

impl LayerNormAffine {
    pub fn new(gamma: Vec<f64>, beta: Vec<f64>, epsilon: f64) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(dimension(format!("gamma has {} channels, beta {}", gamma.len(), beta.len())));
        }
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(contract(format!("epsilon must be positive, got {epsilon}")));
        }
        if gamma.iter().chain(&beta).any(|v| !v.is_finite()) {
            return Err(contract("non-finite affine parameter"));
        }
        Ok(Self { gamma, beta, epsilon })
    }

    pub fn identity(channels: usize) -> Self {
        Self { gamma: vec![1.0; channels], beta: vec![0.0; channels], epsilon: 1e-5 }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Collects LayerNorm-input activations for PTF calibration.
///
/// The global (min, max) is a mergeable reduction; the per-channel values are
/// kept because the α search needs the final scale.
#[derive(Clone, Debug, Default)]
pub struct PtfObserver {
    per_channel: Vec<Vec<f64>>,
    min: f64,
    max: f64,
}

impl PtfObserver {
    pub fn new(channels: usize) -> Self {
        Self { per_channel: vec![Vec::new(); channels], min: f64::INFINITY, max: f64::NEG_INFINITY }
    }

    pub fn channels(&self) -> usize {
        self.per_channel.len()
    }

    pub fn observe(&mut self, x: &FloatTensor) -> Result<()> {
        let c = self.per_channel.len();
        if x.last_dim() != c {
            return Err(dimension(format!("expected {c} channels, got shape {:?}", x.shape())));
        }
        for row in x.rows() {
            for (vals, &v) in self.per_channel.iter_mut().zip(row) {
                vals.push(v);
                self.min = self.min.min(v);
                self.max = self.max.max(v);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.channels() != self.channels() {
            return Err(dimension("merging observers with different channel counts"));
        }
        for (a, b) in self.per_channel.iter_mut().zip(&other.per_channel) {
            a.extend_from_slice(b);
        }
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        Ok(())
    }

    pub fn channel_values(&self, c: usize) -> &[f64] {
        &self.per_channel[c]
    }

    pub fn bounds(&self) -> Option<(f64, f64)> {
        (self.per_channel.first().is_some_and(|v| !v.is_empty())).then_some((self.min, self.max))
    }

    /// Per-channel (min, max).
    pub fn channel_ranges(&self) -> Vec<(f64, f64)> {
        self.per_channel
            .iter()
            .map(|v| {
                v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
            })
            .collect()
    }

    pub fn finalize(&self, bits: u32, k: u8) -> Result<PtfParams> {
        let (lo, hi) = self
            .bounds()
            .ok_or_else(|| Error::Calibration("no LayerNorm input samples observed".into()))?;
        let base = QuantParams::from_bounds(lo, hi, bits)?;
        let scale = base.scale / f64::from(1u32 << k);
        let mut params = PtfParams::new(scale, base.zero_point, vec![0; self.channels()], k, bits)?;
        trace::record_float(self.per_channel.iter().map(Vec::len).sum::<usize>() * (k as usize + 1));
        for (c, vals) in self.per_channel.iter().enumerate() {
            let mut best = (0u8, f64::INFINITY);
            for alpha in 0..=k {
                let err = reconstruction_error(vals, &params, alpha);
                if err < best.1 {
                    best = (alpha, err);
                }
            }
            params.alpha[c] = best.0;
        }
        Ok(params)
    }
}

/// Squared L2 error of reconstructing `values` through the clipped PTF
/// quantizer with exponent `alpha`.
pub fn reconstruction_error(values: &[f64], p: &PtfParams, alpha: u8) -> f64 {
    let step = p.scale * f64::from(1u32 << alpha);
    values
        .iter()
        .map(|&x| {
            let q = p.quantize_with_step(x, step);
            let r = (q - p.zero_point) as f64 * step;
            (x - r) * (x - r)
        })
        .sum()
}

/// Calibrate PTF parameters from a stream of `[..., C]` activations.
pub fn calibrate_ptf<'a>(
    samples: impl IntoIterator<Item = &'a FloatTensor>,
    bits: u32,
    k: u8,
) -> Result<PtfParams> {
    let mut iter = samples.into_iter().peekable();
    let first = iter
        .peek()
        .ok_or_else(|| Error::Calibration("empty calibration stream".into()))?;
    let mut obs = PtfObserver::new(first.last_dim());
    for s in iter {
        obs.observe(s)?;
    }
    obs.finalize(bits, k)
}

fn check_channels(shape: &[usize], p: &PtfParams) -> Result<()> {
    let c = shape.last().copied().unwrap_or(0);
    if c != p.channels() {
        return Err(dimension(format!(
            "input has {c} channels but PTF parameters cover {}",
            p.channels()
        )));
    }
    Ok(())
}

/// `clip(⌊x / (2^{α_c}·s)⌉ + zp, 0, 2^b − 1)`.
pub fn quantize_ptf(x: &FloatTensor, p: &PtfParams) -> Result<IntTensor> {
    check_channels(x.shape(), p)?;
    trace::record_float(x.len());
    let steps: Vec<f64> = (0..p.channels()).map(|c| p.channel_step(c)).collect();
    let data = x
        .rows()
        .flat_map(|row| row.iter().zip(&steps).map(|(&v, &step)| p.quantize_with_step(v, step)))
        .collect();
    IntTensor::new(x.shape().to_vec(), data, p.bits, Signedness::Unsigned)
}

/// `2^{α_c}·s·(q − zp)`.
pub fn dequantize_ptf(q: &IntTensor, p: &PtfParams) -> Result<FloatTensor> {
    check_channels(q.shape(), p)?;
    trace::record_float(q.len());
    let steps: Vec<f64> = (0..p.channels()).map(|c| p.channel_step(c)).collect();
    let data = q
        .rows()
        .flat_map(|row| row.iter().zip(&steps).map(|(&v, &step)| (v - p.zero_point) as f64 * step))
        .collect();
    FloatTensor::new(q.shape().to_vec(), data)
}

/// `X̂ = (X_Q − zp) << α`, the codes on the common grid `s`.
pub fn shift_activations(q: &IntTensor, p: &PtfParams) -> Result<IntTensor> {
    check_channels(q.shape(), p)?;
    let (zp, qmax) = (p.zero_point, p.qmax());
    let mut data = Vec::with_capacity(q.len());
    for row in q.rows() {
        for (&v, &a) in row.iter().zip(&p.alpha) {
            if !(0..=qmax).contains(&v) {
                return Err(contract(format!("code {v} outside [0, {qmax}]")));
            }
            data.push((v - zp) << a);
        }
    }
    // |X̂| < 2^{b+K}, so b + K + 1 signed bits hold every value.
    let bits = (p.bits + u32::from(p.k) + 1).min(64);
    IntTensor::new(q.shape().to_vec(), data, bits, Signedness::Signed)
}

/// First and second moments of one token's shifted codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IntegerStats {
    pub m1: i64,
    pub m2: i64,
    pub channels: usize,
}

impl IntegerStats {
    /// `C·M2 − M1²`, which is `C²·var(X̂)` and never negative.
    pub fn variance_numerator(&self) -> i64 {
        self.channels as i64 * self.m2 - self.m1 * self.m1
    }

    /// `⌊√(C·M2 − M1²)⌋`, floored at one shifted-code unit.
    pub fn std_numerator(&self) -> i64 {
        (isqrt(self.variance_numerator() as u64) as i64).max(1)
    }

    /// `μ ≈ (s/C)·M1`.
    pub fn mean(&self, scale: f64) -> f64 {
        scale / self.channels as f64 * self.m1 as f64
    }

    /// `σ² ≈ (s²/C²)(C·M2 − M1²)`.
    pub fn variance(&self, scale: f64) -> f64 {
        let c = self.channels as f64;
        scale * scale / (c * c) * self.variance_numerator() as f64
    }

    /// `√(σ² + ε) ≈ (s/C)·⌊√(C·M2 − M1²)⌋`.
    pub fn std(&self, scale: f64) -> f64 {
        scale / self.channels as f64 * self.std_numerator() as f64
    }
}

pub fn integer_stats(row: &[i64]) -> Result<IntegerStats> {
    if row.is_empty() {
        return Err(dimension("integer_stats on an empty row"));
    }
    let mut m1: i64 = 0;
    let mut m2: i64 = 0;
    for &v in row {
        m1 = m1.checked_add(v).ok_or(Error::Overflow("integer_stats M1"))?;
        m2 = v
            .checked_mul(v)
            .and_then(|sq| m2.checked_add(sq))
            .ok_or(Error::Overflow("integer_stats M2"))?;
    }
    let stats = IntegerStats { m1, m2, channels: row.len() };
    (row.len() as i64)
        .checked_mul(m2)
        .zip(m1.checked_mul(m1))
        .ok_or(Error::Overflow("integer_stats variance"))?;
    debug_assert!(stats.variance_numerator() >= 0);
    Ok(stats)
}

/// A real multiplier folded to `sign · N2 / 2^{N1}` with `N2` holding `b`
/// significant bits: `N1 = b − 1 − ⌊log2|A|⌋`, `N2 = ⌊|A|·2^{N1}⌋`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PowerOfTwoFold {
    pub negative: bool,
    pub n1: i32,
    pub n2: i64,
}

impl PowerOfTwoFold {
    pub fn new(a: f64, bits: u32) -> Self {
        if a == 0.0 || !a.is_finite() {
            return Self { negative: false, n1: 0, n2: 0 };
        }
        let mag = a.abs();
        let n1 = bits as i32 - 1 - mag.log2().floor() as i32;
        let n2 = (mag * f64::from(n1).exp2()).floor() as i64;
        Self { negative: a < 0.0, n1, n2 }
    }

    pub fn value(&self) -> f64 {
        let v = self.n2 as f64 * f64::from(-self.n1).exp2();
        if self.negative {
            -v
        } else {
            v
        }
    }

    fn signed_n2(&self) -> i64 {
        if self.negative {
            -self.n2
        } else {
            self.n2
        }
    }

    /// `⌊(sign·N2·x + ⌊B·2^{N1}⌉) / 2^{N1}⌉` for the folded offset `B`.
    fn apply(&self, x: i64, offset: f64) -> i64 {
        let b_fold = round_to_i64(offset * f64::from(self.n1).exp2()) as i128;
        let num = self.signed_n2() as i128 * x as i128 + b_fold;
        let y = if self.n1 >= 0 {
            shift_right_round(num, self.n1 as u32)
        } else {
            num << (-self.n1).min(64)
        };
        y.clamp(i64::MIN as i128, i64::MAX as i128) as i64
    }
}

/// How the per-token affine map `A·X̂ + B` is laid out in integers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerNormDatapath {
    /// Fold `A' = γ/(s_out·D)` and apply it to the centered integer
    /// `C·X̂ − M1`, with `B' = β/s_out`. Same affine map as `Direct`,
    /// but the power-of-two rounding of `A'` multiplies a centered value.
    #[default]
    Centered,
    /// Fold `A = s_in·γ/(s_out·σ)` and apply it to the raw shifted code
    /// `X̂` with `B = (β·σ − γ·μ)/(s_out·σ)`.
    Direct,
}

/// Integer LayerNorm: PTF codes in, uniform output codes out.
pub fn integer_layernorm(
    q: &IntTensor,
    p: &PtfParams,
    affine: &LayerNormAffine,
    out: &QuantParams,
) -> Result<IntTensor> {
    integer_layernorm_with(q, p, affine, out, LayerNormDatapath::Centered)
}

pub fn integer_layernorm_with(
    q: &IntTensor,
    p: &PtfParams,
    affine: &LayerNormAffine,
    out: &QuantParams,
    datapath: LayerNormDatapath,
) -> Result<IntTensor> {
    let c = p.channels();
    if affine.channels() != c {
        return Err(dimension(format!("affine has {} channels, PTF {c}", affine.channels())));
    }
    if out.signedness != Signedness::Unsigned {
        return Err(contract("LayerNorm output must use unsigned asymmetric codes"));
    }
    let shifted = shift_activations(q, p)?;
    let mut data = Vec::with_capacity(q.len());
    // A and B depend on the token statistics; each is folded to integers
    // once per token and channel before touching the codes.
    trace::record_float(q.len() * 4);
    for row in shifted.rows() {
        let stats = integer_stats(row)?;
        let d = stats.std_numerator();
        match datapath {
            LayerNormDatapath::Centered => {
                let centered_scale = out.scale * d as f64;
                for (ch, &xh) in row.iter().enumerate() {
                    let a = affine.gamma[ch] / centered_scale;
                    let b = affine.beta[ch] / out.scale;
                    let t = (c as i64) * xh - stats.m1;
                    let fold = PowerOfTwoFold::new(a, out.bits);
                    data.push(fold.apply(t, b).saturating_add(out.zero_point).clamp(0, out.qmax()));
                }
            }
            LayerNormDatapath::Direct => {
                let sigma = stats.std(p.scale);
                let mu = stats.mean(p.scale);
                for (ch, &xh) in row.iter().enumerate() {
                    let (g, be) = (affine.gamma[ch], affine.beta[ch]);
                    let a = p.scale * g / (out.scale * sigma);
                    let b = (be * sigma - g * mu) / (out.scale * sigma);
                    let fold = PowerOfTwoFold::new(a, out.bits);
                    data.push(fold.apply(xh, b).saturating_add(out.zero_point).clamp(0, out.qmax()));
                }
            }
        }
    }
    IntTensor::new(q.shape().to_vec(), data, out.bits, Signedness::Unsigned)
}

/// Floating-point LayerNorm over the innermost axis.
pub fn float_layernorm(x: &FloatTensor, affine: &LayerNormAffine) -> Result<FloatTensor> {
    let c = x.last_dim();
    if affine.channels() != c {
        return Err(dimension(format!("affine has {} channels, input {c}", affine.channels())));
    }
    trace::record_float(x.len() * 4);
    let mut data = Vec::with_capacity(x.len());
    for row in x.rows() {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let denom = (var + affine.epsilon).sqrt();
        data.extend(
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / denom * affine.gamma[i] + affine.beta[i]),
        );
    }
    FloatTensor::new(x.shape().to_vec(), data)
}
