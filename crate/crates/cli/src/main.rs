//! `medlab`: runs SGD, ODE and SDE experiments and writes CSV/JSON artifacts.
//!
//! Exit codes: 0 success, 1 I/O or failed self-test, 2 configuration error,
//! 3 numeric divergence, 4 threshold never crossed.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use medlab::ensemble::Parallelism;
use thiserror::Error;

use crate::config::{Config, ConfigError};
use crate::output::Artifacts;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] medlab::Error),
    #[error("output: {0}")]
    Io(#[from] std::io::Error),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("no crossing: {0}")]
    NoCrossing(String),
    #[error("self-test failed: {0}")]
    SelfTest(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use medlab::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::NoCrossing(_) => 4,
            CliError::Io(_) | CliError::SelfTest(_) => 1,
            CliError::Core(e) => match e {
                E::Divergence { .. } | E::IntegrationBlowup { .. } | E::StepRejected { .. } => 3,
                E::NoCrossing { .. } | E::UnstableRate { .. } | E::DegenerateDiffusion => 4,
                E::Io(_) | E::Precision { .. } | E::Classification(_) | E::Checkpoint(_) => 1,
                _ => 2,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "medlab", version, about = "SGD, ODE and SDE experiments for two-layer phase retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "medlab-out")]
    out: PathBuf,
    /// Base seed; overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; falls back to MEDLAB_WORKERS, then one per core.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Ensemble of explicit SGD runs.
    Sgd,
    /// Deterministic overlap ODE.
    Ode,
    /// Ensemble of SDE paths.
    Sde,
    /// Annealed, quenched and (p = 1) SDE exit times.
    ExitTime,
    /// Measured vs predicted exit times across widths at fixed gamma/p.
    WidthSweep,
    /// Growth of max|m| with fixed and trained second layer.
    SecondLayer,
    /// Critical points of the p = 1 population risk.
    Landscape,
    /// Fast internal consistency checks.
    Selftest,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Sgd => "sgd",
            Command::Ode => "ode",
            Command::Sde => "sde",
            Command::ExitTime => "exit-time",
            Command::WidthSweep => "width-sweep",
            Command::SecondLayer => "second-layer",
            Command::Landscape => "landscape",
            Command::Selftest => "selftest",
        }
    }
}

fn effective_config(cli: &Cli) -> Result<Config, ConfigError> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    for s in &cli.set {
        cfg.apply(s)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", seed);
    }
    cfg.with_defaults(&commands::defaults(cli.command.name()))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = effective_config(cli)?;
    let par = Parallelism::resolve(cli.workers);
    let mut out = Artifacts::create(&cli.out)?;
    log::info!("{} -> {}", cli.command.name(), out.dir().display());
    let f = match cli.command {
        Command::Sgd => commands::sgd,
        Command::Ode => commands::ode,
        Command::Sde => commands::sde,
        Command::ExitTime => commands::exit_time,
        Command::WidthSweep => commands::width_sweep,
        Command::SecondLayer => commands::second_layer,
        Command::Landscape => commands::landscape,
        Command::Selftest => commands::selftest,
    };
    let result = f(&cfg, &mut out, par);
    let (partial, mut notes) = match &result {
        Ok(r) => (r.partial, r.notes.clone()),
        Err(e) => (true, vec![e.to_string()]),
    };
    if partial {
        notes.iter().for_each(|n| log::warn!("{n}"));
    }
    notes.dedup();
    out.finish(cli.command.name(), &cfg, partial, &notes)?;
    result.map(|_| ())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
