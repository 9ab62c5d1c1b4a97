mod commands;
mod config;
mod error;
mod visualize;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Visual grounding with a suspected object graph.
#[derive(Debug, Parser)]
#[command(name = "sog", version, about)]
struct Cli {
    /// TOML configuration with [data], [model] and [train] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its manifest.
    GenData(GenDataArgs),
    /// Train a model on a generated corpus.
    Train(TrainArgs),
    /// Report Pr@0.5 on one split.
    Eval(EvalArgs),
    /// Locate the object an expression refers to in one image.
    Infer(InferArgs),
    /// Render activation heatmaps, graph nodes and word importances.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub hard_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Manifest written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// erc, original, reverse, average or random.
    #[arg(long)]
    pub edge_strategy: Option<String>,
    /// Keep probability of the erc strategy.
    #[arg(long)]
    pub keep_prob: Option<f64>,
    /// knr, none, sentence or word_average.
    #[arg(long)]
    pub node_strategy: Option<String>,
    /// Train the baseline without the graph module.
    #[arg(long)]
    pub no_sog: bool,
    /// Train on the stored images only, without recoloring, flips or shifts.
    #[arg(long)]
    pub no_augment: bool,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Exit after this many completed epochs; the schedule still spans
    /// all configured epochs.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Use only the first N training samples.
    #[arg(long)]
    pub limit_train: Option<usize>,
    /// Use only the first N validation samples.
    #[arg(long)]
    pub limit_val: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Must be "original"; edge randomness is never used for evaluation.
    #[arg(long, default_value = "original")]
    pub erc_strategy: String,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub expression: String,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Sample index as listed in the manifest.
    #[arg(long)]
    pub index: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = cli.config.as_deref();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Eval(a) => commands::eval(cfg, a),
        Command::Infer(a) => commands::infer(a),
        Command::Visualize(a) => commands::visualize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
