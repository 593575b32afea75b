//! `mtbit` command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Preset, UsageError};

#[derive(Parser, Debug)]
#[command(
    name = "mtbit",
    version,
    about = "Joint 2D change masks and 3D elevation change from bitemporal optical images"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Common {
    /// TOML run configuration; flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base configuration the file and flags are applied to
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Seed for data generation, initialization, shuffling and augmentation
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset root containing manifest.json
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate, validate or summarize a dataset
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train a model and write checkpoints and the metric log
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Predict change maps for one image pair
    Predict(PredictArgs),
    /// Compare analytic gradients with finite differences on the tiny model
    Gradcheck,
    /// Write the tokenizer attention maps of one image pair
    ExportAttn(InputArgs),
}

#[derive(Subcommand, Debug)]
pub enum DatasetCommand {
    /// Generate a synthetic dataset
    Gen {
        /// Number of tiles
        #[arg(long)]
        tiles: Option<usize>,
    },
    /// Check every tile against the schema
    Validate {
        /// Treat mask/ΔH disagreement as an error
        #[arg(long)]
        strict: bool,
    },
    /// Per-split class balance and ΔH histograms
    Stats,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Continue from this checkpoint; its configuration is used
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: mtbit::data::Split,
}

#[derive(Args, Debug)]
pub struct InputArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Tile directory holding t1.img and t2.img, and optionally ground truth
    #[arg(long, conflicts_with_all = ["img1", "img2"])]
    pub tile: Option<PathBuf>,
    /// First-epoch image
    #[arg(long, requires = "img2")]
    pub img1: Option<PathBuf>,
    /// Second-epoch image
    #[arg(long, requires = "img1")]
    pub img2: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Also write the tokenizer attention maps
    #[arg(long)]
    pub trace: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
