//! `roughsde`: scenario-driven simulation and diagnostics for equations
//! driven jointly by Brownian motion and a deterministic rough path.
//!
//! Exit codes: 0 success, 2 scenario/argument validation error, 3 solver
//! divergence.

mod commands;
mod manifest;
mod scenario;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use manifest::Manifest;
use scenario::parse_scenario;

#[derive(Debug)]
pub enum CliError {
    Validation(Vec<String>),
    Diverged(String),
    Other(anyhow::Error),
}

impl From<roughsde::Error> for CliError {
    fn from(e: roughsde::Error) -> Self {
        match e {
            roughsde::Error::InvalidArgument(_) => CliError::Validation(vec![e.to_string()]),
            roughsde::Error::SolverDiverged { .. } => CliError::Diverged(e.to_string()),
            other => CliError::Other(other.into()),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<roughsde::Error>() {
            Ok(core) => core.into(),
            Err(other) => CliError::Other(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts; refused when non-empty unless
    /// --force is given.
    #[arg(long)]
    out: PathBuf,
    /// Override the Brownian base seed (beats the ROUGHSDE_SEED environment
    /// variable and the scenario value).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for ensemble parallelism (default: logical cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Parser)]
#[command(name = "roughsde", version, about = "rough SDE simulation and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve one trajectory and export it.
    Simulate(CommonArgs),
    /// Variational flows, Malliavin derivatives and matrices.
    Malliavin(CommonArgs),
    /// Bracket hierarchy and span-rank verdict at the initial point.
    Hormander(CommonArgs),
    /// Scale-by-scale roughness scan of the driver.
    Roughness(CommonArgs),
    /// Monte-Carlo ensemble with kernel density estimate.
    Density(CommonArgs),
    /// Pathwise surrogate of the small-path inequality.
    Norris(CommonArgs),
    /// Expansion-residual table across strides.
    Residuals(CommonArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Malliavin(_) => "malliavin",
            Command::Hormander(_) => "hormander",
            Command::Roughness(_) => "roughness",
            Command::Density(_) => "density",
            Command::Norris(_) => "norris",
            Command::Residuals(_) => "residuals",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::Simulate(a)
            | Command::Malliavin(a)
            | Command::Hormander(a)
            | Command::Roughness(a)
            | Command::Density(a)
            | Command::Norris(a)
            | Command::Residuals(a) => a,
        }
    }
}

fn effective_seed(args: &CommonArgs) -> Result<Option<u64>, CliError> {
    if let Some(seed) = args.seed {
        return Ok(Some(seed));
    }
    match std::env::var("ROUGHSDE_SEED") {
        Ok(text) => text
            .parse::<u64>()
            .map(Some)
            .map_err(|_| CliError::Validation(vec![format!("ROUGHSDE_SEED is not a u64: {text:?}")])),
        Err(_) => Ok(None),
    }
}

fn prepare_out_dir(args: &CommonArgs) -> Result<(), CliError> {
    let out = &args.out;
    if out.exists() {
        let occupied = std::fs::read_dir(out)
            .map(|mut it| it.next().is_some())
            .unwrap_or(false);
        if occupied && !args.force {
            return Err(CliError::Validation(vec![format!(
                "output directory {} is not empty; pass --force to write anyway",
                out.display()
            )]));
        }
    } else {
        std::fs::create_dir_all(out).map_err(|e| CliError::Other(e.into()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let args = cli.command.args();
    if let Some(jobs) = args.jobs {
        if jobs == 0 {
            return Err(CliError::Validation(vec!["--jobs must be >= 1".to_string()]));
        }
        // Ignore the error if a pool already exists (tests in-process).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }

    let config_text = std::fs::read_to_string(&args.config).map_err(|e| {
        CliError::Validation(vec![format!("cannot read {}: {e}", args.config.display())])
    })?;
    let seed_override = effective_seed(args)?;
    let scenario = parse_scenario(&config_text, seed_override).map_err(CliError::Validation)?;
    prepare_out_dir(args)?;

    let start = Instant::now();
    match &cli.command {
        Command::Simulate(_) => commands::simulate(&scenario, &args.out)?,
        Command::Malliavin(_) => commands::malliavin(&scenario, &args.out)?,
        Command::Hormander(_) => commands::hormander(&scenario, &args.out)?,
        Command::Roughness(_) => commands::roughness(&scenario, &args.out)?,
        Command::Density(_) => commands::density(&scenario, &args.out)?,
        Command::Norris(_) => commands::norris(&scenario, &args.out)?,
        Command::Residuals(_) => commands::residuals(&scenario, &args.out)?,
    }
    let runtime = start.elapsed().as_secs_f64();

    Manifest::new(cli.command.name(), &config_text, scenario.brownian_seed, runtime)
        .write(&args.out)
        .map_err(CliError::Other)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(errors)) => {
            for e in &errors {
                eprintln!("error: {e}");
            }
            ExitCode::from(2)
        }
        Err(CliError::Diverged(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(CliError::Other(e)) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
