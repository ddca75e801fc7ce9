//! `cdef` binary: train cost-sensitive classifiers, craft adversarial
//! examples, measure per-pair robustness, and search attack sensitive
//! matrices. Exit codes: 0 success, 2 validation error, 3 training
//! divergence.

use cdef_core::commands::{self, Objective};
use cdef_core::Error;
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cdef", version, about = "Configurable defense against adversarial example attacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's output.dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Craft adversarial examples for one (source, target) class pair.
    Attack {
        #[arg(long)]
        config: PathBuf,
        /// Trained model JSON.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        source: usize,
        #[arg(long)]
        target: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure the per-pair robustness matrix of a trained model.
    Robustness {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search the attack sensitive matrix under the accuracy constraint.
    Search {
        #[arg(long)]
        config: PathBuf,
        /// "weighted" (maximize the weighted average) or "lower"
        /// (maximize the weakest cell).
        #[arg(long)]
        objective: String,
        /// Resume from a previously written trace.jsonl.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> cdef_core::Result<()> {
    match cli.command {
        Command::Train { config, out } => commands::cmd_train(&config, out.as_deref()),
        Command::Attack {
            config,
            model,
            source,
            target,
            out,
        } => commands::cmd_attack(&config, &model, source, target, out.as_deref()),
        Command::Robustness { config, model, out } => {
            commands::cmd_robustness(&config, &model, out.as_deref())
        }
        Command::Search {
            config,
            objective,
            resume,
            out,
        } => commands::cmd_search(
            &config,
            Objective::parse(&objective)?,
            resume.as_deref(),
            out.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Diverged { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
