//! `isnet` — reproducible experiments from the command line.
//!
//! Subcommands: `synth` (generate a dataset), `train` (fit a model),
//! `eval` (metrics, optionally the biased-vs-clean comparison) and
//! `explain` (dump heatmaps). Every command funnels its randomness
//! through one `--seed`. Numeric precision is selected per run via
//! `ISNET_PRECISION={f32,f64}` (default f32).
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure.

mod commands;
mod config;

use clap::{ArgAction, Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "isnet", version, about = "Train classifiers whose relevance heatmaps are confined to segmentation masks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with masks (and optional bias shapes).
    Synth(SynthArgs),
    /// Train a classifier with the heatmap penalty.
    Train(TrainArgs),
    /// Evaluate a checkpoint; with --clean-data, compare paired test sets.
    Eval(EvalArgs),
    /// Dump relevance heatmaps for one input.
    Explain(ExplainArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of classes (2..=3 with the default bias shapes).
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Samples per class.
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    /// Image channels (1 or 3).
    #[arg(long, default_value_t = 1)]
    channels: usize,
    /// Stamp class-coded bias shapes into image corners.
    #[arg(long, action = ArgAction::SetTrue, overrides_with = "no_bias")]
    bias: bool,
    /// Keep the dataset clean (default).
    #[arg(long = "no-bias", action = ArgAction::SetTrue)]
    no_bias: bool,
    /// Multi-label task (independent binary labels per class).
    #[arg(long, action = ArgAction::SetTrue)]
    multi_label: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Architecture preset: plain-small or mini-dense.
    #[arg(long, default_value = "plain-small")]
    preset: String,
    /// Heatmap-loss balance P in [0, 1]; 0 trains the plain baseline.
    #[arg(long)]
    p: Option<f64>,
    /// Loss slope E (> 0).
    #[arg(long)]
    e: Option<f64>,
    /// Estimate E from untrained batches: mean background relevance
    /// divided by this value (10..=100).
    #[arg(long, value_name = "DIVISOR")]
    auto_e: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output checkpoint directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory produced by `train`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory; its test split is evaluated.
    #[arg(long)]
    data: PathBuf,
    /// Paired clean dataset (same seed, no bias): adds the
    /// biased-vs-clean comparison to the report.
    #[arg(long)]
    clean_data: Option<PathBuf>,
    /// Report JSON path (defaults to stdout).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Input tensor file (ISTN, shape (C, Y, X)).
    #[arg(long)]
    input: PathBuf,
    /// Restrict to one class (default: all classes).
    #[arg(long, value_name = "K")]
    class: Option<usize>,
    /// Also render 8-bit PGM images (midpoint 128 = zero relevance).
    #[arg(long, action = ArgAction::SetTrue)]
    pgm: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let precision = std::env::var("ISNET_PRECISION").unwrap_or_else(|_| "f32".into());
    let result = match precision.as_str() {
        "f32" => run::<f32>(cli),
        "f64" => run::<f64>(cli),
        other => Err(isnet_core::Error::Config(format!(
            "ISNET_PRECISION must be f32 or f64, got '{}'",
            other
        ))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &isnet_core::Error) -> u8 {
    use isnet_core::Error::*;
    match e {
        Config(_) | Parse(_) | Shape { .. } | Io(_) => 2,
        Numeric { .. } | Corrupt(_) | GraphConsumed => 3,
    }
}

fn run<S: isnet_core::Scalar>(cli: Cli) -> isnet_core::Result<()> {
    match cli.cmd {
        Cmd::Synth(a) => commands::synth::<S>(a),
        Cmd::Train(a) => commands::train::<S>(a),
        Cmd::Eval(a) => commands::eval::<S>(a),
        Cmd::Explain(a) => commands::explain::<S>(a),
    }
}

pub(crate) use {EvalArgs as EvalCli, ExplainArgs as ExplainCli, SynthArgs as SynthCli, TrainArgs as TrainCli};
