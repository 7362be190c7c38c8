//! Config-driven experiment runner: simulate datasets, fit the cross-fitted
//! learners, and benchmark them against the known truth.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod summary;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::ExperimentConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "survcut", version, about = "Heterogeneous treatment effects from censored survival data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw datasets and ground truth from the simulation settings.
    Simulate(RunArgs),
    /// Cross-fit the learners on a dataset and write predictions.
    Fit(RunArgs),
    /// Replicated simulate-fit-evaluate runs with metric summaries.
    Bench(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory (overrides `out` in the config; default `out`).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, value_name = "N")]
    pub workers: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf), CliError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        let out = self.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
        Ok((cfg, out))
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let (args, f): (&RunArgs, fn(&ExperimentConfig, &std::path::Path) -> Result<(), CliError>) = match &cli.command {
        Command::Simulate(a) => (a, commands::simulate),
        Command::Fit(a) => (a, commands::fit),
        Command::Bench(a) => (a, commands::bench),
    };
    let (cfg, out) = args.resolve()?;
    if args.workers == Some(0) {
        return Err(CliError::config("--workers", "must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    pool.install(|| f(&cfg, &out))
}
