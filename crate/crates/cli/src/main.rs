//! `scalla` experiment driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or data error.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ExperimentConfig, DATA_ROOT_ENV};

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<scalla::Error> for CliError {
    fn from(e: scalla::Error) -> Self {
        use scalla::Error as E;
        match e {
            E::Diverged { .. } | E::Factorization(_) | E::NonFinite(_) => Self::runtime(e.to_string()),
            _ => Self::config(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "scalla", version, about = "Linearized Laplace experiments with a learned surrogate kernel")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoints, traces and reports.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `seed` from the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the MAP network and write map.ckpt.
    TrainMap(Common),
    /// Tune the prior scale and train a surrogate against map.ckpt.
    FitSurrogate {
        #[command(flatten)]
        common: Common,
        /// Overrides `surrogate.biased`.
        #[arg(long)]
        biased: Option<bool>,
    },
    /// Evaluate the configured methods and write report.txt / report.kv.
    Evaluate(Common),
}

fn resolve(common: &Common) -> Result<ExperimentConfig, CliError> {
    ExperimentConfig::load(&common.config)?.resolve(common.seed, std::env::var(DATA_ROOT_ENV).ok())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::TrainMap(c) => commands::train_map_cmd(&resolve(&c)?, &c.out),
        Command::FitSurrogate { common, biased } => {
            let mut cfg = resolve(&common)?;
            if let Some(b) = biased {
                cfg.surrogate.biased = b;
            }
            commands::fit_surrogate_cmd(&cfg, &common.out)
        }
        Command::Evaluate(c) => commands::evaluate_cmd(&resolve(&c)?, &c.out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
