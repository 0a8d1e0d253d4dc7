//! `mal`: train, compare, gradient-check and evaluate.

mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "mal", version, about = "Meta-learned sample weighting for a primary task with auxiliary data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one method with one seed and write its artifacts.
    Train(TrainArgs),
    /// Train several methods over several seeds and write a summary.
    Compare(CompareArgs),
    /// Check the meta-gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Re-score a checkpoint on a dataset dump.
    Eval(EvalArgs),
}

/// Overrides applied on top of the config file.
#[derive(Args, Debug, Default, Clone)]
pub struct Overrides {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub batch_train: Option<usize>,
    #[arg(long)]
    pub batch_val: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub iters_per_epoch: Option<usize>,
    #[arg(long)]
    pub log_every: Option<usize>,
    /// Disable weight normalization.
    #[arg(long)]
    pub no_normalize: bool,
    /// Treat the normalizer as a constant in the meta-gradient.
    #[arg(long)]
    pub detach_normalizer: bool,
    #[arg(long)]
    pub rho: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// mal, mtl or stl; defaults to the config's method.
    #[arg(long)]
    pub method: Option<String>,
    /// Defaults to the first seed of the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory. Defaults to the config's `out_dir`, else
    /// `$MAL_OUT_DIR/<method>-seed<seed>`, else `runs/<method>-seed<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Verify the existing artifacts against their manifest instead of
    /// training.
    #[arg(long)]
    pub check: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', default_value = "stl,mtl,mal")]
    pub methods: Vec<String>,
    /// Comma-separated seeds; defaults to the config's seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Output root; one subdirectory per run plus `summary.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Concurrent runs; defaults to the number of CPUs.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Verify every run directory and the summary against their manifests.
    #[arg(long)]
    pub check: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Optional TOML file with gradcheck settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub labels: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub val_batch: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub no_normalize: bool,
    /// Debug mutation: scale the backward rule of this primitive.
    #[arg(long)]
    pub corrupt: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset dump written by `train`.
    #[arg(long)]
    pub data: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = mal_core::metrics::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Write the report CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Compare(a) => commands::compare(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
