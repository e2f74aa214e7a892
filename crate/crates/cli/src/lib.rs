//! Command-line front end: TOML configuration, CSV ingestion and deterministic
//! tabular output for fitting, model selection, simulation and the
//! counterexample sweep.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod output;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::commands::Report;
use crate::config::{load_config, LoadedConfig};
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "sandreg", version, about = "Sandwich regression for clustered data")]
pub struct Cli {
    /// Worker threads (overrides `threads` in the config; default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output file (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the configured objectives and report estimates with jackknife errors.
    Fit(DataArgs),
    /// Choose among candidate working covariances by estimated variance.
    Select(DataArgs),
    /// Run a Monte Carlo MSE comparison.
    Simulate(ConfigArgs),
    /// Evaluate the population counterexample over a sweep of truncation points.
    Counterexample(ConfigArgs),
    /// Write one simulated dataset as CSV.
    Generate(ConfigArgs),
}

impl Command {
    pub fn config_path(&self) -> &Path {
        match self {
            Command::Fit(a) | Command::Select(a) => &a.config,
            Command::Simulate(a) | Command::Counterexample(a) | Command::Generate(a) => &a.config,
        }
    }

    pub fn out_path(&self) -> Option<&Path> {
        match self {
            Command::Fit(a) | Command::Select(a) => a.out.as_deref(),
            Command::Simulate(a) | Command::Counterexample(a) | Command::Generate(a) => a.out.as_deref(),
        }
    }
}

/// Runs a command against an already loaded configuration.
pub fn execute(command: &Command, config: &LoadedConfig) -> Result<Report> {
    match command {
        Command::Fit(a) => commands::fit(config, &a.data),
        Command::Select(a) => commands::select(config, &a.data),
        Command::Simulate(_) => commands::simulate(config),
        Command::Counterexample(_) => commands::counterexample(config),
        Command::Generate(_) => commands::generate(config),
    }
}

/// Loads the config, sizes the global thread pool, runs and writes the body.
pub fn run(cli: &Cli) -> Result<Report> {
    let config = load_config(cli.command.config_path())?;
    if let Some(n) = cli.threads.or(config.config.threads) {
        if n == 0 {
            return Err(CliError::Config("threads must be positive".into()));
        }
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let report = execute(&cli.command, &config)?;
    match cli.command.out_path() {
        Some(p) => std::fs::write(p, &report.body).map_err(|e| CliError::io(p.display().to_string(), e))?,
        None => {
            use std::io::Write;
            std::io::stdout().write_all(report.body.as_bytes()).map_err(|e| CliError::io("stdout", e))?;
        }
    }
    Ok(report)
}
