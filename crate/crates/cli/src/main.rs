//! `dmt`: command-line front end for splits, baselines, pseudo labels,
//! mutual-training runs, evaluation, error reports and plots.

mod commands;
mod plot;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dmt_core::{AblationVariant, DmtError};

#[derive(Debug, Parser)]
#[command(name = "dmt", version, about = "Dynamic mutual training experiments")]
pub struct Cli {
    /// Preset name or path to a TOML config.
    #[arg(long, global = true)]
    pub config: Option<String>,
    /// Run a single seed instead of every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; defaults to runs/<config name>.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Directory holding the CIFAR-10 binary batches.
    #[arg(long, global = true, env = "DMT_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// Use this split file instead of drawing one from the seed.
    #[arg(long, global = true)]
    pub split: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the labeled / unlabeled / valtiny split as JSON.
    Split,
    /// Supervised training on the labeled subset.
    Baseline,
    /// Generate and select pseudo labels from a checkpoint.
    Label(LabelArgs),
    /// Iterative dynamic mutual training.
    Dmt,
    /// Run one ablation variant.
    Ablate {
        #[arg(value_parser = parse_variant)]
        variant: AblationVariant,
    },
    /// Evaluate a checkpoint, or tabulate the run log.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pseudo-label error rate overall and by confidence quantile.
    Stats {
        /// Pseudo-label directory; defaults to the reports in the run log.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Emit PNG plots.
    Plot(PlotArgs),
}

#[derive(Debug, clap::Args)]
pub struct LabelArgs {
    /// Model producing the predictions.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to `top` for classification and `balanced` for segmentation.
    #[arg(long, value_enum)]
    pub policy: Option<PolicyKind>,
    /// Fraction for ranked policies, threshold for `threshold`.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Iteration the labels are for.
    #[arg(long, default_value_t = 1)]
    pub iteration: u32,
    /// Destination directory; defaults to <out>/labels.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyKind {
    Threshold,
    Top,
    Balanced,
    Cbst,
}

#[derive(Debug, clap::Args)]
pub struct PlotArgs {
    #[arg(value_enum)]
    pub kind: PlotKind,
    /// Pseudo-label directory (quantiles, weights).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Trained model scoring the pseudo labels (weights).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Number of images to draw (weights).
    #[arg(long, default_value_t = 4)]
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    /// Error rate by confidence quantile.
    Quantiles,
    /// Headline metric per iteration.
    Curves,
    /// Image, pseudo labels and dynamic weights side by side.
    Weights,
}

fn parse_variant(s: &str) -> Result<AblationVariant, String> {
    s.parse::<AblationVariant>().map_err(|e| e.to_string())
}

/// One JSON object per failure, e.g. `{"error":"config","message":"..."}`.
fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}

pub type CliResult<T> = Result<T, DmtError>;
