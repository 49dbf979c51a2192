mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dyns_core::Error;

use crate::config::Preset;

#[derive(Parser, Debug)]
#[command(name = "dyns", version, about = "Dynamic latent-graph state-space classifier for ROI time series")]
pub struct Cli {
    /// Worker thread cap for every parallel section.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Print the final summary as JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic regime-switching dataset (one CSV per subject plus manifest.json).
    GenerateData(GenerateArgs),
    /// Train the full pipeline (or one variant) and write a run directory.
    Train(RunArgs),
    /// Score a trained run on a dataset.
    Evaluate(EvaluateArgs),
    /// Train a matrix of variants over several seeds and summarize test metrics.
    Ablate(AblateArgs),
    /// Time the sequential and parallel scan backends.
    ScanBench(ScanBenchArgs),
    /// Finite-difference check of every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Collect run logs into one CSV.
    Report(ReportArgs),
}

/// Options shared by every command that builds a model.
#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// TOML config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Falls back to DYNS_SEED, then the config file, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset directory or manifest.json. Synthetic data is generated when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory (default run/<timestamp>-seed<seed>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub accumulation_steps: Option<usize>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long)]
    pub d_lat: Option<usize>,
    #[arg(long)]
    pub d_h: Option<usize>,
    #[arg(long)]
    pub d_k: Option<usize>,
    #[arg(long)]
    pub tokens: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rois: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub subjects_per_class: Option<usize>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub switch_rate: Option<f64>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// Identical templates for both classes.
    #[arg(long)]
    pub null: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Checkpoint to load instead of the run's best one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset to score; every subject is evaluated. Defaults to the run's test split.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Metrics JSON destination (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated variant names.
    #[arg(long, default_value = "full,static_graph,frozen_llm")]
    pub variants: String,
    /// Number of consecutive seeds starting at --seed.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
}

#[derive(Args, Debug)]
pub struct ScanBenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "256,1024,2048,4096")]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    #[arg(long, default_value_t = 9)]
    pub repeats: usize,
    #[arg(long, default_value_t = 64)]
    pub chunk: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV destination (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directories, or parents of run directories.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// CSV destination (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Process exit status per failure class.
pub fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        3
    } else if e.is_data_error() || matches!(e, Error::Checkpoint(_) | Error::Spec(_) | Error::Evaluation(_)) {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
