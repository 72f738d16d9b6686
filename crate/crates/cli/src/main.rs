//! `bridge-da`: generate the synthetic benchmark, train and evaluate the
//! experiment arms, run the weight ablation and render comparison tables.
//!
//! Exit status is 0 on success, 2 for usage, configuration or input errors
//! (nothing is written) and 1 for failures while running. Errors are printed
//! to stderr as a single JSON line.

mod commands;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use bridge_core::trainer::Arm;
use clap::{Args, Parser, Subcommand};

use crate::error::{CliError, Kind};

#[derive(Parser)]
#[command(name = "bridge-da", version, about = "Progressive domain adaptation on a synthetic detection benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file, or `default` for the built-in defaults.
    #[arg(long, default_value = "default")]
    config: String,
    /// Master seed; overrides the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the datasets, the intermediate domain and D_cycle.
    GenerateData(Common),
    /// Train one experiment arm and evaluate it.
    Train {
        #[command(flatten)]
        common: Common,
        /// source-only, direct, synthetic-augment or progressive
        #[arg(long, value_parser = parse_arm)]
        arm: Arm,
    },
    /// Evaluate a checkpoint on the evaluation splits.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare the configured fixed weights against dynamic weighting.
    AblateWeights(Common),
    /// Render tables from run and ablation reports (files or directories).
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Also write the tables to this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_arm(s: &str) -> Result<Arm, String> {
    s.parse().map_err(|e: bridge_core::CoreError| e.to_string())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenerateData(c) => {
            let cfg = commands::load_config(&c.config, c.seed)?;
            commands::generate_data(&cfg, &c.out)
        }
        Command::Train { common: c, arm } => {
            let cfg = commands::load_config(&c.config, c.seed)?;
            commands::train(&cfg, arm, &c.out)
        }
        Command::Evaluate { common: c, checkpoint } => {
            let cfg = commands::load_config(&c.config, c.seed)?;
            commands::evaluate(&cfg, &checkpoint, &c.out)
        }
        Command::AblateWeights(c) => {
            let cfg = commands::load_config(&c.config, c.seed)?;
            commands::ablate(&cfg, &c.out)
        }
        Command::Report { inputs, out } => commands::report(&inputs, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            let err = CliError::new(Kind::Usage, first.trim_start_matches("error: "));
            eprintln!("{}", err.to_line());
            return ExitCode::from(err.kind.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.to_line());
            ExitCode::from(err.kind.exit_code() as u8)
        }
    }
}
