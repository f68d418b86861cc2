//! Post-training calibration of the toy encoder and evaluation against the
//! float reference.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{mean_token_argmax, Dataset};
use crate::error::{dimension, Error, Result};
use crate::model::{
    AttentionMode, BitTriple, Encoder, EncoderConfig, FloatEncoder, LayerNormMode, Linear, QuantizedBlock,
    QuantizedEncoderModel, QuantizedLinear, QuantizedNorm, Scope, Site, SiteKind,
};
use crate::ptf::{LayerNormAffine, PtfObserver, DEFAULT_K};
use crate::quant::{quantize_weights_per_channel, MinMaxObserver};
use crate::tensor::FloatTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CalibrationConfig {
    pub num_samples: usize,
    pub k: u8,
    pub bits: BitTriple,
    pub attention_mode: AttentionMode,
    pub layernorm_mode: LayerNormMode,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            num_samples: 1000,
            k: DEFAULT_K,
            bits: BitTriple::default(),
            attention_mode: AttentionMode::Lis,
            layernorm_mode: LayerNormMode::PtfInteger,
            seed: 0,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::Calibration("num_samples must be at least 1".into()));
        }
        self.bits.validate()?;
        if self.k > 8 {
            return Err(Error::Calibration(format!("K = {} outside 0..=8", self.k)));
        }
        Ok(())
    }
}

/// Activation statistics for every quantization site.
///
/// Merging is an associative reduction; merging shards in order reproduces
/// the sequential result exactly.
#[derive(Clone, Debug, Default)]
pub struct SiteObservers {
    pub ptf: BTreeMap<Site, PtfObserver>,
    pub minmax: BTreeMap<Site, MinMaxObserver>,
}

impl SiteObservers {
    pub fn record(&mut self, site: Site, x: &FloatTensor) -> Result<()> {
        if site.kind.is_layernorm_input() {
            self.ptf.entry(site).or_insert_with(|| PtfObserver::new(x.last_dim())).observe(x)
        } else {
            self.minmax.entry(site).or_default().observe(x.data());
            Ok(())
        }
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        for (site, o) in &other.ptf {
            match self.ptf.get_mut(site) {
                Some(mine) => mine.merge(o)?,
                None => {
                    self.ptf.insert(*site, o.clone());
                }
            }
        }
        for (site, o) in &other.minmax {
            self.minmax.entry(*site).or_default().merge(o);
        }
        Ok(())
    }

    fn ptf_site(&self, site: Site) -> Result<&PtfObserver> {
        self.ptf.get(&site).ok_or_else(|| Error::Calibration(format!("no statistics for {site}")))
    }

    fn minmax_site(&self, site: Site) -> Result<&MinMaxObserver> {
        self.minmax.get(&site).ok_or_else(|| Error::Calibration(format!("no statistics for {site}")))
    }
}

/// Runs the float reference over `samples` and records every site.
pub fn observe(model: &FloatEncoder, samples: &[&FloatTensor]) -> Result<SiteObservers> {
    let mut obs = SiteObservers::default();
    let mut failure = None;
    for x in samples {
        let mut sink = |site: Site, t: &FloatTensor| {
            if let Err(e) = obs.record(site, t) {
                failure.get_or_insert(e);
            }
        };
        model.forward_with(x, &mut sink)?;
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(obs),
    }
}

/// [`observe`] fanned out over worker threads, merged in shard order.
pub fn observe_parallel(model: &FloatEncoder, samples: &[&FloatTensor]) -> Result<SiteObservers> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(8);
    if workers <= 1 || samples.len() < 2 * workers {
        return observe(model, samples);
    }
    let chunk = samples.len().div_ceil(workers);
    let shards: Vec<Result<SiteObservers>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples.chunks(chunk).map(|part| scope.spawn(move || observe(model, part))).collect();
        handles.into_iter().map(|h| h.join().expect("calibration worker panicked")).collect()
    });
    let mut merged = SiteObservers::default();
    for shard in shards {
        merged.merge(&shard?)?;
    }
    Ok(merged)
}

/// Seeded choice of `n` sample indices, in ascending order.
pub fn select_samples(dataset_len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if dataset_len < n {
        return Err(Error::Calibration(format!(
            "calibration needs {n} samples but the dataset holds {dataset_len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, dataset_len, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Calibrates a quantized model from `cfg.num_samples` seeded samples.
pub fn run_calibration(model: &FloatEncoder, dataset: &Dataset, cfg: &CalibrationConfig) -> Result<QuantizedEncoderModel> {
    cfg.validate()?;
    let shape = model.arch.input_shape();
    if let Some(s) = dataset.samples.iter().find(|s| s.shape() != shape.as_slice()) {
        return Err(dimension(format!("dataset sample shape {:?} does not match model input {shape:?}", s.shape())));
    }
    let idx = select_samples(dataset.len(), cfg.num_samples, cfg.seed)?;
    let samples: Vec<&FloatTensor> = idx.iter().map(|&i| &dataset.samples[i]).collect();
    let obs = observe_parallel(model, &samples)?;
    finalize(model, &obs, cfg)
}

/// Turns recorded statistics into quantization parameters.
pub fn finalize(model: &FloatEncoder, obs: &SiteObservers, cfg: &CalibrationConfig) -> Result<QuantizedEncoderModel> {
    let config = EncoderConfig {
        arch: model.arch,
        bits: cfg.bits,
        attention_mode: cfg.attention_mode,
        layernorm_mode: cfg.layernorm_mode,
        ptf_k: cfg.k,
    };
    config.validate()?;
    let (act, wb) = (cfg.bits.act, cfg.bits.weight);
    let norm = |scope: Scope, input: SiteKind, output: SiteKind, affine: &LayerNormAffine| -> Result<QuantizedNorm> {
        Ok(QuantizedNorm {
            input: obs.ptf_site(Site { scope, kind: input })?.finalize(act, cfg.k)?,
            affine: affine.clone(),
            output: obs.minmax_site(Site { scope, kind: output })?.finalize(act)?,
        })
    };
    let linear = |scope: Scope, out: SiteKind, l: &Linear| -> Result<QuantizedLinear> {
        Ok(QuantizedLinear {
            weight: quantize_weights_per_channel(&l.weight, wb)?,
            bias: l.bias.clone(),
            output: obs.minmax_site(Site { scope, kind: out })?.finalize(act)?,
        })
    };
    let mut blocks = Vec::with_capacity(model.blocks.len());
    for (i, b) in model.blocks.iter().enumerate() {
        let s = Scope::Block(i);
        let site = |kind| Site { scope: s, kind };
        blocks.push(QuantizedBlock {
            ln1: norm(s, SiteKind::Ln1In, SiteKind::Ln1Out, &b.ln1)?,
            q: linear(s, SiteKind::Q, &b.q)?,
            k: linear(s, SiteKind::K, &b.k)?,
            v: linear(s, SiteKind::V, &b.v)?,
            attn: obs.minmax_site(site(SiteKind::Attn))?.finalize(cfg.bits.attn)?,
            context: obs.minmax_site(site(SiteKind::Context))?.finalize(act)?,
            proj: linear(s, SiteKind::Proj, &b.proj)?,
            ln2: norm(s, SiteKind::Ln2In, SiteKind::Ln2Out, &b.ln2)?,
            fc1: linear(s, SiteKind::Fc1, &b.fc1)?,
            gelu: obs.minmax_site(site(SiteKind::Gelu))?.finalize(act)?,
            fc2: linear(s, SiteKind::Fc2, &b.fc2)?,
        });
    }
    let final_norm = norm(Scope::Final, SiteKind::NormIn, SiteKind::NormOut, &model.final_norm)?;
    let q = QuantizedEncoderModel { config, blocks, final_norm };
    q.validate()?;
    Ok(q)
}

/// Agreement between a model and the float reference over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub samples: usize,
    /// Per-sample cosine similarity of flattened outputs, averaged.
    pub mean_cosine: f64,
    pub min_cosine: f64,
    pub mean_relative_l2: f64,
    pub max_relative_l2: f64,
    /// Fraction of samples whose mean-pooled output argmax matches the reference.
    pub argmax_agreement: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_label_accuracy: Option<f64>,
}

/// `⟨a, b⟩ / (‖a‖‖b‖)`; two zero vectors count as identical.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot / (na * nb)).clamp(-1.0, 1.0),
    }
}

/// `‖a − b‖ / ‖b‖`, with `b` the reference; zero when both vanish.
pub fn relative_l2(a: &[f64], reference: &[f64]) -> f64 {
    let diff = a.iter().zip(reference).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm = reference.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm == 0.0 {
        if diff == 0.0 { 0.0 } else { f64::INFINITY }
    } else {
        diff / norm
    }
}

pub fn evaluate(model: &dyn Encoder, dataset: &Dataset, reference: &dyn Encoder) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::Calibration("cannot evaluate on an empty dataset".into()));
    }
    let classes = dataset.labels.as_ref().map(|l| l.iter().copied().max().unwrap_or(0) + 1);
    let (mut cos_sum, mut cos_min, mut l2_sum, mut l2_max) = (0.0, f64::INFINITY, 0.0, 0.0f64);
    let (mut agree, mut correct, mut ref_correct) = (0usize, 0usize, 0usize);
    for (i, x) in dataset.samples.iter().enumerate() {
        let y = model.forward(x)?;
        let r = reference.forward(x)?;
        if y.shape() != r.shape() {
            return Err(dimension(format!("output shapes {:?} and {:?} differ", y.shape(), r.shape())));
        }
        let c = cosine_similarity(y.data(), r.data());
        let e = relative_l2(y.data(), r.data());
        cos_sum += c;
        cos_min = cos_min.min(c);
        l2_sum += e;
        l2_max = l2_max.max(e);
        let width = classes.unwrap_or(y.last_dim());
        let (py, pr) = (mean_token_argmax(&y, width), mean_token_argmax(&r, width));
        agree += usize::from(py == pr);
        if let Some(labels) = &dataset.labels {
            correct += usize::from(py == labels[i]);
            ref_correct += usize::from(pr == labels[i]);
        }
    }
    let n = dataset.len() as f64;
    let labelled = dataset.labels.is_some();
    Ok(Metrics {
        samples: dataset.len(),
        mean_cosine: cos_sum / n,
        min_cosine: cos_min,
        mean_relative_l2: l2_sum / n,
        max_relative_l2: l2_max,
        argmax_agreement: agree as f64 / n,
        label_accuracy: labelled.then(|| correct as f64 / n),
        reference_label_accuracy: labelled.then(|| ref_correct as f64 / n),
    })
}
