//! `intq`: calibrate, evaluate and inspect integer-only quantized encoders.
//!
//! Logging goes to stderr; set `INTQ_LOG` (or `RUST_LOG`) to e.g. `info`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use intq::calibrate::{evaluate, run_calibration, CalibrationConfig};
use intq::container::Container;
use intq::data::{generate, Dataset, SyntheticKind, SyntheticSpec};
use intq::model::{
    Architecture, AttentionMode, BitTriple, Encoder, EncoderPlan, FloatEncoder, LayerNormMode,
    QuantizedEncoderModel, FLOAT_KIND, QUANTIZED_KIND,
};
use intq::ptf::DEFAULT_K;
use intq::report::{attention_histogram, channel_range_report, k_sweep};
use log::info;
use serde_json::Value;

#[derive(Parser)]
#[command(name = "intq", version, about = "Integer-only post-training quantization for a toy transformer encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a randomly initialized float encoder.
    InitModel(InitModelArgs),
    /// Write a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Calibrate a float encoder into a quantized model.
    Calibrate(CalibrateArgs),
    /// Compare a model's outputs against a float reference.
    Eval(EvalArgs),
    /// Diagnostics reports over a float encoder.
    Report {
        #[command(subcommand)]
        kind: ReportKind,
    },
    /// LayerNorm-input quantization error across a range of PTF K.
    SweepK(SweepKArgs),
}

#[derive(Args)]
struct InitModelArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    tokens: usize,
    #[arg(long, default_value_t = 4)]
    mlp_ratio: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
}

#[derive(Args)]
struct GenDataArgs {
    /// `gaussian` or `channel-variance`.
    #[arg(long, default_value = "gaussian")]
    kind: SyntheticKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    count: usize,
    #[arg(long, default_value_t = 16)]
    tokens: usize,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    /// Outlier channel range as a multiple of the median range.
    #[arg(long, default_value_t = 40.0)]
    spread: f64,
    #[arg(long, default_value_t = 1)]
    outliers: usize,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Float encoder file.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Largest power-of-two factor exponent.
    #[arg(long = "K", visible_alias = "k", default_value_t = DEFAULT_K)]
    k: u8,
    /// Weight, activation and attention bit widths.
    #[arg(long, default_value = "8,8,4")]
    bits: BitTriple,
    /// `lis`, `uniform` or `float`.
    #[arg(long, default_value = "lis")]
    attn_mode: AttentionMode,
    /// `ptf-integer` or `float`.
    #[arg(long, default_value = "ptf-integer")]
    ln_mode: LayerNormMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Quantized or float model file.
    #[arg(long)]
    model: PathBuf,
    /// Float encoder used as the reference.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Write the JSON metrics here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ReportKind {
    /// Per-channel LayerNorm input ranges.
    Ranges {
        #[command(flatten)]
        io: ReportIo,
        #[arg(long, default_value_t = 8)]
        bits: u32,
        #[arg(long = "K", visible_alias = "k", default_value_t = DEFAULT_K)]
        k: u8,
    },
    /// Histogram of float attention probabilities in log2-spaced bins.
    AttnHist {
        #[command(flatten)]
        io: ReportIo,
        #[arg(long, default_value_t = 16)]
        bins: usize,
    },
}

#[derive(Args)]
struct ReportIo {
    /// Float encoder file.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepKArgs {
    #[arg(long, default_value_t = 0)]
    kmin: u8,
    #[arg(long, default_value_t = 4)]
    kmax: u8,
    /// Float encoder file.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "8,8,4")]
    bits: BitTriple,
    #[arg(long, default_value = "lis")]
    attn_mode: AttentionMode,
    /// Also calibrate and evaluate a full model at every K.
    #[arg(long)]
    end_to_end: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let fallback = std::env::var("RUST_LOG").unwrap_or_else(|_| "warn".into());
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("INTQ_LOG", fallback)).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitModel(a) => init_model(a),
        Command::GenData(a) => gen_data(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Eval(a) => eval(a),
        Command::Report { kind } => report(kind),
        Command::SweepK(a) => sweep_k(a),
    }
}

fn init_model(a: InitModelArgs) -> Result<()> {
    let arch = Architecture {
        embed_dim: a.embed_dim,
        num_heads: a.heads,
        tokens: a.tokens,
        mlp_ratio: a.mlp_ratio,
        num_blocks: a.blocks,
    };
    let model = FloatEncoder::random(arch, a.seed).context("invalid architecture")?;
    model.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    info!("wrote float encoder {arch:?} to {}", a.out.display());
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        kind: a.kind,
        count: a.count,
        tokens: a.tokens,
        channels: a.channels,
        seed: a.seed,
        spread: a.spread,
        outliers: a.outliers,
        ..Default::default()
    };
    let data = generate(&spec)?;
    data.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    info!("wrote {} {} samples to {}", data.len(), a.kind, a.out.display());
    Ok(())
}

fn load_float(path: &Path) -> Result<FloatEncoder> {
    FloatEncoder::load(path).with_context(|| format!("loading float encoder {}", path.display()))
}

fn load_data(path: &Path) -> Result<Dataset> {
    let data = Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))?;
    if data.is_empty() {
        bail!("dataset {} holds no samples", path.display());
    }
    Ok(data)
}

/// Either kind of model file, ready to run.
fn load_encoder(path: &Path) -> Result<Box<dyn Encoder>> {
    let c = Container::read(path).with_context(|| format!("reading {}", path.display()))?;
    let kind = c.meta("kind").unwrap_or("");
    let ctx = || format!("decoding {}", path.display());
    match kind {
        FLOAT_KIND => Ok(Box::new(FloatEncoder::from_container(&c).with_context(ctx)?)),
        QUANTIZED_KIND => {
            let q = QuantizedEncoderModel::from_container(&c).with_context(ctx)?;
            Ok(Box::new(EncoderPlan::compile(&q).with_context(ctx)?))
        }
        other => bail!("{} is not a model file (kind {other:?})", path.display()),
    }
}

fn emit(value: &Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let model = load_float(&a.model)?;
    let data = load_data(&a.data)?;
    let cfg = CalibrationConfig {
        num_samples: a.samples,
        k: a.k,
        bits: a.bits,
        attention_mode: a.attn_mode,
        layernorm_mode: a.ln_mode,
        seed: a.seed,
    };
    info!("calibrating on {} of {} samples, bits {}, K {}", a.samples, data.len(), a.bits, a.k);
    let q = run_calibration(&model, &data, &cfg).context("calibration failed")?;
    q.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    info!("wrote quantized model to {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_encoder(&a.model)?;
    let reference = load_float(&a.reference)?;
    let data = load_data(&a.data)?;
    let metrics = evaluate(model.as_ref(), &data, &reference).context("evaluation failed")?;
    emit(&serde_json::to_value(metrics)?, a.out.as_deref())
}

fn report(kind: ReportKind) -> Result<()> {
    let (io, value) = match kind {
        ReportKind::Ranges { io, bits, k } => {
            let r = channel_range_report(&load_float(&io.model)?, &load_data(&io.data)?, bits, k)?;
            (io, serde_json::to_value(r)?)
        }
        ReportKind::AttnHist { io, bins } => {
            let r = attention_histogram(&load_float(&io.model)?, &load_data(&io.data)?, bins)?;
            (io, serde_json::to_value(r)?)
        }
    };
    emit(&value, io.out.as_deref())
}

fn sweep_k(a: SweepKArgs) -> Result<()> {
    let model = load_float(&a.model)?;
    let data = load_data(&a.data)?;
    let cfg = CalibrationConfig {
        num_samples: data.len(),
        bits: a.bits,
        attention_mode: a.attn_mode,
        ..Default::default()
    };
    let r = k_sweep(&model, &data, &cfg, a.kmin, a.kmax, a.end_to_end)?;
    emit(&serde_json::to_value(r)?, a.out.as_deref())
}
