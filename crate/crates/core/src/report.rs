//! Diagnostics: channel-wise LayerNorm input ranges, the attention value
//! distribution, and the PTF `K` sweep.

use serde::Serialize;

use crate::calibrate::{evaluate, finalize, observe_parallel, CalibrationConfig, SiteObservers};
use crate::data::Dataset;
use crate::error::{contract, Error, Result};
use crate::model::{EncoderPlan, FloatEncoder, Site, SiteKind};
use crate::numeric::round_to_i64;
use crate::ptf::{PtfObserver, PtfParams};
use crate::tensor::FloatTensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChannelRanges {
    pub site: String,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub max_range: f64,
    pub median_range: f64,
    /// `max_range / median_range`, defined as 1 when every range is zero.
    pub range_ratio: f64,
    pub ptf: QuantError,
    /// The same data with `K = 0`, i.e. plain layer-wise MinMax.
    pub layerwise: QuantError,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct QuantError {
    pub k: u8,
    pub relative_l2: f64,
    pub cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramBin {
    /// Exclusive lower edge; the deepest bin starts at 0 inclusive.
    pub lower: f64,
    pub upper: f64,
    pub count: u64,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionHistogram {
    pub total: u64,
    pub bins: Vec<HistogramBin>,
    pub fraction_below_one_sixteenth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub samples: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub channel_ranges: Vec<ChannelRanges>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention: Option<AttentionHistogram>,
}

/// Max over median of the per-channel ranges.
pub fn range_ratio(ranges: &[f64]) -> (f64, f64, f64) {
    if ranges.is_empty() {
        return (0.0, 0.0, 1.0);
    }
    let mut sorted = ranges.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    let max = sorted[n - 1];
    let ratio = match (max == 0.0, median == 0.0) {
        (true, _) => 1.0,
        (false, true) => f64::INFINITY,
        _ => max / median,
    };
    (max, median, ratio)
}

/// Relative L2 error and cosine of PTF quantize-dequantize over the
/// observed values.
pub fn ptf_error(obs: &PtfObserver, p: &PtfParams) -> QuantError {
    let (mut err, mut norm, mut recon_norm, mut dot) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..obs.channels() {
        let step = p.channel_step(c);
        for &x in obs.channel_values(c) {
            let q = round_to_i64(x / step).saturating_add(p.zero_point).clamp(0, p.qmax());
            let r = (q - p.zero_point) as f64 * step;
            err += (x - r) * (x - r);
            norm += x * x;
            recon_norm += r * r;
            dot += x * r;
        }
    }
    let relative_l2 = if norm == 0.0 { if err == 0.0 { 0.0 } else { f64::INFINITY } } else { (err / norm).sqrt() };
    let cosine = match (norm == 0.0, recon_norm == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => dot / (norm.sqrt() * recon_norm.sqrt()),
    };
    QuantError { k: p.k, relative_l2, cosine }
}

fn observe_dataset(model: &FloatEncoder, dataset: &Dataset) -> Result<SiteObservers> {
    if dataset.is_empty() {
        return Err(contract("report needs at least one sample"));
    }
    let refs: Vec<&FloatTensor> = dataset.samples.iter().collect();
    observe_parallel(model, &refs)
}

/// Per-channel (min, max) at every LayerNorm input, with the PTF
/// quantization error at `k` and at `K = 0`.
pub fn channel_range_report(model: &FloatEncoder, dataset: &Dataset, bits: u32, k: u8) -> Result<DiagnosticsReport> {
    let obs = observe_dataset(model, dataset)?;
    let mut channel_ranges = Vec::with_capacity(obs.ptf.len());
    for (site, o) in &obs.ptf {
        let (min, max): (Vec<f64>, Vec<f64>) = o.channel_ranges().into_iter().unzip();
        let ranges: Vec<f64> = min.iter().zip(&max).map(|(lo, hi)| hi - lo).collect();
        let (max_range, median_range, ratio) = range_ratio(&ranges);
        channel_ranges.push(ChannelRanges {
            site: site.to_string(),
            min,
            max,
            max_range,
            median_range,
            range_ratio: ratio,
            ptf: ptf_error(o, &o.finalize(bits, k)?),
            layerwise: ptf_error(o, &o.finalize(bits, 0)?),
        });
    }
    Ok(DiagnosticsReport { samples: dataset.len(), channel_ranges, attention: None })
}

/// Bin `i < bins − 1` holds `(2^{−(i+1)}, 2^{−i}]`; the last bin holds
/// everything at or below `2^{−(bins−1)}`, zeros included.
pub fn histogram_bin(a: f64, bins: usize) -> usize {
    let last = bins.saturating_sub(1);
    if a <= 0.0 {
        return last;
    }
    let t = (-a.log2()).floor();
    if t <= 0.0 {
        0
    } else {
        (t as usize).min(last)
    }
}

/// Histogram of the attention values given, in log-spaced bins.
pub fn histogram_of(values: impl IntoIterator<Item = f64>, bins: usize) -> Result<AttentionHistogram> {
    if !(2..=64).contains(&bins) {
        return Err(contract(format!("bin count {bins} outside 2..=64")));
    }
    let mut counts = vec![0u64; bins];
    let (mut total, mut below) = (0u64, 0u64);
    for a in values {
        counts[histogram_bin(a, bins)] += 1;
        total += 1;
        below += u64::from(a < 1.0 / 16.0);
    }
    let frac = |c: u64| if total == 0 { 0.0 } else { c as f64 / total as f64 };
    let bins = counts
        .iter()
        .enumerate()
        .map(|(i, &count)| HistogramBin {
            lower: if i + 1 == bins { 0.0 } else { (-((i + 1) as f64)).exp2() },
            upper: (-(i as f64)).exp2(),
            count,
            fraction: frac(count),
        })
        .collect();
    Ok(AttentionHistogram { total, bins, fraction_below_one_sixteenth: frac(below) })
}

/// Histogram of float Softmax outputs across every block and head.
pub fn attention_histogram(model: &FloatEncoder, dataset: &Dataset, bins: usize) -> Result<DiagnosticsReport> {
    if dataset.is_empty() {
        return Err(contract("report needs at least one sample"));
    }
    let mut values = Vec::new();
    for x in &dataset.samples {
        let mut sink = |site: Site, t: &FloatTensor| {
            if site.kind == SiteKind::Attn {
                values.extend_from_slice(t.data());
            }
        };
        model.forward_with(x, &mut sink)?;
    }
    let attention = Some(histogram_of(values, bins)?);
    Ok(DiagnosticsReport { samples: dataset.len(), channel_ranges: Vec::new(), attention })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SiteError {
    pub site: String,
    pub relative_l2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KSweepRow {
    pub k: u8,
    pub sites: Vec<SiteError>,
    pub mean_relative_l2: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub end_to_end_cosine: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KSweepReport {
    pub samples: usize,
    pub rows: Vec<KSweepRow>,
}

/// LayerNorm input quantization error for each `K` in `kmin..=kmax`, on
/// statistics gathered once. With `end_to_end`, each `K` is also
/// calibrated into a full model and evaluated on the same data.
pub fn k_sweep(
    model: &FloatEncoder,
    dataset: &Dataset,
    cfg: &CalibrationConfig,
    kmin: u8,
    kmax: u8,
    end_to_end: bool,
) -> Result<KSweepReport> {
    if kmin > kmax || kmax > 8 {
        return Err(contract(format!("K range {kmin}..={kmax} must be ordered and within 0..=8")));
    }
    let obs = observe_dataset(model, dataset)?;
    let mut rows = Vec::new();
    for k in kmin..=kmax {
        let mut sites = Vec::with_capacity(obs.ptf.len());
        for (site, o) in &obs.ptf {
            let err = ptf_error(o, &o.finalize(cfg.bits.act, k)?);
            sites.push(SiteError { site: site.to_string(), relative_l2: err.relative_l2 });
        }
        let mean_relative_l2 = sites.iter().map(|s| s.relative_l2).sum::<f64>() / sites.len().max(1) as f64;
        let end_to_end_cosine = if end_to_end {
            let q = finalize(model, &obs, &CalibrationConfig { k, ..*cfg })?;
            let plan = EncoderPlan::compile(&q)?;
            Some(evaluate(&plan, dataset, model)?.mean_cosine)
        } else {
            None
        };
        rows.push(KSweepRow { k, sites, mean_relative_l2, end_to_end_cosine });
    }
    if rows.is_empty() {
        return Err(Error::Calibration("empty K sweep".into()));
    }
    Ok(KSweepReport { samples: dataset.len(), rows })
}
