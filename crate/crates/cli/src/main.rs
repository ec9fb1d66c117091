//! `dirireg`: Dirichlet regression from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "dirireg", version, about = "Bayesian and ML Dirichlet regression for compositional data")]
struct Cli {
    /// JSON file with defaults for any option; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the Bayesian model by MCMC.
    Fit(RunConfig),
    /// Fit the maximum-likelihood multivariate-logit baseline.
    FitMl(RunConfig),
    /// Run a replicated simulation study comparing both methods.
    Study(RunConfig),
    /// Write a simulated dataset and its truth.
    Simulate {
        #[command(flatten)]
        opts: RunConfig,
        /// Generate a named demo dataset instead of a scenario.
        #[arg(long)]
        demo: Option<String>,
    },
    /// Generate a demo dataset and run every analysis on it.
    Demo {
        name: String,
        #[command(flatten)]
        opts: RunConfig,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Fit(o) => commands::cmd_fit(&o.merged(file)),
        Command::FitMl(o) => commands::cmd_fit_ml(&o.merged(file)),
        Command::Study(o) => commands::cmd_study(&o.merged(file)),
        Command::Simulate { opts, demo } => commands::cmd_simulate(&opts.merged(file), demo.as_deref()),
        Command::Demo { name, opts } => commands::cmd_demo(&opts.merged(file), &name),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
