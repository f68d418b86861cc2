//! Datasets: a directory of `sample_NNNNNN.intq` containers, each holding
//! one `[L, C]` float tensor named `x`, plus an optional `labels.txt` with
//! one non-negative integer per line.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::container::{Container, StoredTensor};
use crate::error::{contract, format_err, Error, Result};
use crate::tensor::FloatTensor;

pub const SAMPLE_TENSOR: &str = "x";
pub const LABELS_FILE: &str = "labels.txt";
const SAMPLE_KIND: &str = "sample";

pub fn sample_file_name(i: usize) -> String {
    format!("sample_{i:06}.intq")
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<FloatTensor>,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(samples: Vec<FloatTensor>, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(first) = samples.first() {
            if let Some(bad) = samples.iter().find(|s| s.shape() != first.shape()) {
                return Err(contract(format!("mixed sample shapes {:?} and {:?}", first.shape(), bad.shape())));
            }
        }
        if let Some(l) = &labels {
            if l.len() != samples.len() {
                return Err(contract(format!("{} labels for {} samples", l.len(), samples.len())));
            }
        }
        Ok(Self { samples, labels })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(FloatTensor::shape)
    }

    /// Loads every `sample_*.intq` in `dir`, ordered by file name.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("sample_") && n.ends_with(".intq"))
            })
            .collect();
        files.sort();
        let samples = files
            .iter()
            .map(|p| decode_sample(&std::fs::read(p)?).map_err(|e| format_err(format!("{}: {e}", p.display()))))
            .collect::<Result<Vec<_>>>()?;
        let label_path = dir.join(LABELS_FILE);
        let labels = if label_path.exists() {
            Some(parse_labels(&std::fs::read_to_string(&label_path)?)?)
        } else {
            None
        };
        Self::new(samples, labels)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (i, s) in self.samples.iter().enumerate() {
            std::fs::write(dir.join(sample_file_name(i)), encode_sample(s)?)?;
        }
        if let Some(labels) = &self.labels {
            let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
            std::fs::write(dir.join(LABELS_FILE), text)?;
        }
        Ok(())
    }
}

pub fn encode_sample(x: &FloatTensor) -> Result<Vec<u8>> {
    let mut c = Container::new();
    c.set_meta("kind", SAMPLE_KIND);
    c.insert(SAMPLE_TENSOR, StoredTensor::float(x.shape().to_vec(), x.data().to_vec()));
    c.encode()
}

pub fn decode_sample(bytes: &[u8]) -> Result<FloatTensor> {
    let c = Container::decode(bytes)?;
    let t = c.tensor(SAMPLE_TENSOR)?;
    if t.shape.len() != 2 {
        return Err(format_err(format!("sample must be [L, C], got {:?}", t.shape)));
    }
    t.to_float_tensor()
}

/// One label per non-empty line; `#` starts a comment line.
pub fn parse_labels(text: &str) -> Result<Vec<usize>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| l.parse().map_err(|_| format_err(format!("labels line {}: {l:?} is not a label", i + 1))))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// i.i.d. standard normal tokens.
    Gaussian,
    /// Per-channel scales log-uniform in `[0.5, 2]`, with outlier channels
    /// whose range is `spread` times the median range.
    ChannelVariance,
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gaussian => "gaussian",
            Self::ChannelVariance => "channel-variance",
        })
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "channel-variance" => Ok(Self::ChannelVariance),
            _ => Err(contract(format!("unknown data kind {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub count: usize,
    pub tokens: usize,
    pub channels: usize,
    pub seed: u64,
    pub spread: f64,
    pub outliers: usize,
    pub num_classes: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            kind: SyntheticKind::Gaussian,
            count: 256,
            tokens: 16,
            channels: 64,
            seed: 0,
            spread: 40.0,
            outliers: 1,
            num_classes: 10,
        }
    }
}

/// Deterministic synthetic dataset. Labels are the argmax of the mean token
/// over the first `num_classes` channels.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.tokens == 0 || spec.channels == 0 {
        return Err(contract("synthetic samples need at least one token and channel"));
    }
    if spec.outliers >= spec.channels && spec.kind == SyntheticKind::ChannelVariance {
        return Err(contract("outlier count must leave some regular channels"));
    }
    if !(spec.spread.is_finite() && spec.spread >= 1.0) {
        return Err(contract(format!("spread must be ≥ 1, got {}", spec.spread)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (scales, offsets) = match spec.kind {
        SyntheticKind::Gaussian => (vec![1.0; spec.channels], vec![0.0; spec.channels]),
        SyntheticKind::ChannelVariance => channel_profile(&mut rng, spec),
    };
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let classes = spec.num_classes.clamp(1, spec.channels);
    let mut samples = Vec::with_capacity(spec.count);
    let mut labels = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let data: Vec<f64> = (0..spec.tokens * spec.channels)
            .map(|i| {
                let c = i % spec.channels;
                let u = match spec.kind {
                    SyntheticKind::Gaussian => normal.sample(&mut rng),
                    // bounded noise so channel ranges track the profile closely
                    SyntheticKind::ChannelVariance => rng.gen_range(-1.0..=1.0),
                };
                offsets[c] + scales[c] * u
            })
            .collect();
        let x = FloatTensor::new(vec![spec.tokens, spec.channels], data)?;
        labels.push(mean_token_argmax(&x, classes));
        samples.push(x);
    }
    Dataset::new(samples, Some(labels))
}

fn channel_profile(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> (Vec<f64>, Vec<f64>) {
    let regular = spec.channels - spec.outliers;
    let mut scales: Vec<f64> = (0..regular).map(|_| 2f64.powf(rng.gen_range(-1.0..=1.0))).collect();
    let mut sorted = scales.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    scales.extend(std::iter::repeat_n(spec.spread * median, spec.outliers));
    // Spread the outliers across the channel axis deterministically.
    let mut order: Vec<usize> = (0..spec.channels).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut placed = vec![0.0; spec.channels];
    for (src, &dst) in order.iter().enumerate() {
        placed[dst] = scales[src];
    }
    let offsets = placed.iter().map(|s| s * rng.gen_range(-0.5..=0.5)).collect();
    (placed, offsets)
}

/// Argmax over the first `classes` channels of the token mean.
pub fn mean_token_argmax(x: &FloatTensor, classes: usize) -> usize {
    let n = x.num_rows().max(1) as f64;
    let classes = classes.min(x.last_dim());
    let mean: Vec<f64> = (0..classes).map(|c| x.rows().map(|r| r[c]).sum::<f64>() / n).collect();
    mean.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}
