//! `pressuresim`: runs the simulator pipeline stage by stage.
//!
//! Settings come from built-in defaults, then the `--config` file, then the
//! `--seed` / `--out-dir` flags, each overriding the one before. Every stage
//! writes its artifacts and a `<command>.manifest.json` into the output
//! directory, and downstream stages refuse artifacts produced under a
//! different config.

mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pressuresim::eval::Strategy;
use pressuresim::pipeline::AgentKind;

#[derive(Debug, Parser)]
#[command(name = "pressuresim", version, about = "Response-time simulation under time pressure")]
pub struct Cli {
    /// Pipeline config file (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Sets every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `paths.outputs`.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Machine-readable JSON log lines on stderr.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the effective config as TOML.
    Config,
    /// Enumerate every study question into questions.csv.
    GenQuestions,
    /// Train the recurrent reasoner.
    TrainReasoner,
    /// Generate the synthetic dataset for all four groups.
    SynthData,
    /// Fit the baseline choice and response-time models.
    FitTransfer,
    /// Train a reinforcement-learning agent.
    TrainDrl {
        #[arg(long)]
        agent: AgentKind,
    },
    /// Run the trained agents on the test split and write trajectories.
    Simulate,
    /// Score baseline and agents under a split strategy.
    Evaluate {
        #[arg(long)]
        strategy: Strategy,
        /// Train fresh agents inside every fold instead of reusing the
        /// trained policies.
        #[arg(long)]
        retrain: bool,
    },
    /// Host live task sessions over HTTP.
    Serve {
        /// Listen port; falls back to $PORT, then 8080.
        #[arg(long)]
        port: Option<u16>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Config => "config",
            Command::GenQuestions => "gen-questions",
            Command::TrainReasoner => "train-reasoner",
            Command::SynthData => "synth-data",
            Command::FitTransfer => "fit-transfer",
            Command::TrainDrl { .. } => "train-drl",
            Command::Simulate => "simulate",
            Command::Evaluate { .. } => "evaluate",
            Command::Serve { .. } => "serve",
        }
    }
}

fn init_logging(json: bool) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into());
    let builder = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr);
    if json {
        builder.json().init();
    } else {
        builder.init();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.json);
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = artifacts::exit_code(&e);
            tracing::error!(command = cli.command.name(), "{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
