mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::RunSpec;

#[derive(Parser)]
#[command(name = "cotformer", version, about = "Train, evaluate and price CoTFormer-style models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace a config field, e.g. `model.n_repeat=3`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory, created if absent.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed for every random stream of the run.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn spec(self) -> RunSpec {
        RunSpec {
            config: self.config,
            overrides: self.overrides,
            out: self.out,
            seed: self.seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config; writes checkpoints and metrics.csv.
    Train(Common),
    /// Perplexity of a checkpoint on the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Passes per token; full depth by default.
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Crossover and Pareto MAC tables for the models in a cost config.
    Cost(Common),
    /// Capacities implied by router thresholds, plus a score histogram.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Router threshold. Repeatable; a log-spaced grid by default.
        #[arg(long = "threshold")]
        thresholds: Vec<f64>,
    },
    /// MACs and perplexity at every fixed depth and calibrated threshold.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Router threshold. Repeatable; a log-spaced grid by default.
        #[arg(long = "threshold")]
        thresholds: Vec<f64>,
    },
    /// Greedy continuation of a prompt.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        n_new: usize,
        /// Halt tokens whose router score drops to this value; all passes otherwise.
        #[arg(long)]
        threshold: Option<f64>,
    },
}

fn main() -> ExitCode {
    let result = match Cli::parse().command {
        Command::Train(c) => commands::cmd_train(&c.spec()),
        Command::Cost(c) => commands::cmd_cost(&c.spec()),
        Command::Eval { common, checkpoint, depth } => commands::cmd_eval(&common.spec(), &checkpoint, depth),
        Command::Calibrate {
            common,
            checkpoint,
            thresholds,
        } => commands::cmd_calibrate(&common.spec(), &checkpoint, &thresholds),
        Command::Sweep {
            common,
            checkpoint,
            thresholds,
        } => commands::cmd_sweep(&common.spec(), &checkpoint, &thresholds),
        Command::Generate {
            common,
            checkpoint,
            prompt,
            n_new,
            threshold,
        } => commands::cmd_generate(&common.spec(), &checkpoint, &prompt, n_new, threshold),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
