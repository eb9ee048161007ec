mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use itpp::synthgen::ProcessKind;

#[derive(Debug, Parser)]
#[command(name = "itpp", version, about = "Channel-independent neural ODE point processes")]
pub struct Cli {
    /// Caps worker threads for per-sequence work; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

/// Config file and overrides shared by commands that build a model.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides a config key; repeatable and applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Samples a synthetic dataset and writes train/val/test JSONL plus a manifest.
    Generate {
        process: ProcessKind,
        #[arg(long, default_value_t = 500)]
        n: usize,
        /// Observation horizon.
        #[arg(long = "T", default_value_t = 10.0)]
        horizon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Writes into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Trains a model and writes checkpoint, report and effective config.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory; overrides run.data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; overrides run.out.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluates a checkpoint and writes a metrics report.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint file; overrides run.checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Split to evaluate.
        #[arg(long, default_value = "test")]
        split: String,
        /// TM-NLL, T-NLL and M-NLL; the default when no metric is requested.
        #[arg(long)]
        nll: bool,
        /// Next-event time RMSE and type macro-F1.
        #[arg(long)]
        predict: bool,
        /// Intensity MAPE against the process recorded in the manifest.
        #[arg(long)]
        mape: bool,
        /// Sequence indices whose intensity trajectories are written as CSV.
        #[arg(long, value_delimiter = ',')]
        trajectories: Vec<usize>,
    },
    /// Checks the NLL gradient against finite differences on a toy sequence.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> ExitCode {
    let cmd = Cli::command().after_help(config::keys_help());
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let run = || commands::run(cli.command);
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(run),
            Err(e) => Err(config::ConfigError(format!("--threads {n}: {e}")).into()),
        },
        None => run(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
