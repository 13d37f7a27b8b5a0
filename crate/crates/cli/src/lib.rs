//! `cxr-cascade`: one binary for generating data, training the three stages,
//! evaluating, screening single images, lead-time reports and serving.

mod commands;
mod error;
mod run_manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use error::CliError;
pub use run_manifest::{hash_inputs, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "cxr-cascade", version, about = "Cascaded chest x-ray screening")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Desk-scale reference models at 512 px.
    Reference,
    /// 64 px toy models for smoke runs.
    Miniature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

#[derive(Clone, Debug, Args)]
pub struct Common {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Service-format TOML file (thresholds, registry).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed of the preset.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "reference")]
    pub preset: Preset,
    /// Run on the calling thread only.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Clone, Debug, Args)]
pub struct ThresholdArgs {
    #[arg(long)]
    pub stage2_threshold: Option<f64>,
    #[arg(long)]
    pub stage3_threshold: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus (images, masks, manifest.csv).
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        normal: Option<usize>,
        #[arg(long)]
        covid: Option<usize>,
        #[arg(long)]
        pneumonia: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train one stage; the checkpoint goes to `<out>/stage{N}`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        /// Corpus manifest.
        #[arg(long)]
        data: PathBuf,
        /// Directory holding earlier stages (defaults to `--out`).
        #[arg(long)]
        models: Option<PathBuf>,
        /// Teacher checkpoint; the student starts from it.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Distillation weight (default 1 with a teacher, 0 without).
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Stage 2: train on the original partition only (`stage2-teacher`).
        #[arg(long)]
        original_only: bool,
        /// Stage 2: train on unmasked images (`stage2-nomask`).
        #[arg(long)]
        no_mask: bool,
    },
    /// Score a split and write `eval-{split}.csv`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        split: SplitName,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        models: Option<PathBuf>,
        /// Also write `ablation.csv` comparing masked and unmasked stage 2.
        #[arg(long)]
        ablate_mask: bool,
        #[command(flatten)]
        thresholds: ThresholdArgs,
    },
    /// Screen one image; prints the service JSON.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        models: Option<PathBuf>,
        #[command(flatten)]
        thresholds: ThresholdArgs,
    },
    /// Lead time of the first COVID call over RT-PCR confirmation, per case.
    LeadReport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        models: Option<PathBuf>,
        #[command(flatten)]
        thresholds: ThresholdArgs,
    },
    /// Run the HTTP service.
    Serve {
        /// Data directory (overrides config and environment).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint directory used when the config has no registry.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        #[command(flatten)]
        thresholds: ThresholdArgs,
    },
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
