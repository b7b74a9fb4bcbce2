//! `harmonize`: subgroup effect estimation with external controls, scenario
//! simulation and trial resampling, driven by JSON config files.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use harmonize_core::harmonize::SigmaMode;

use crate::config::{load, parse_lambda_grid, EstimateConfig, ResampleCliConfig, SimulateConfig};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "harmonize", version, about = "Harmonized subgroup treatment-effect estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate subgroup effects from trial and external-control CSV files.
    Estimate(EstimateArgs),
    /// Monte Carlo operating characteristics of a scenario.
    Simulate(SimulateArgs),
    /// Resample in-silico trials from trial and external pools.
    Resample(ResampleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SigmaFlag {
    Fixed,
    Bd,
    Vd,
}

impl From<SigmaFlag> for SigmaMode {
    fn from(s: SigmaFlag) -> Self {
        match s {
            SigmaFlag::Fixed => SigmaMode::Fixed,
            SigmaFlag::Bd => SigmaMode::Bd,
            SigmaFlag::Vd => SigmaMode::Vd,
        }
    }
}

#[derive(Args)]
struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    common: Common,
    /// λ grid, e.g. "full" or "0,1,10,full".
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long, value_enum)]
    sigma_mode: Option<SigmaFlag>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    /// λ grid, e.g. "full" or "0,1,10,full".
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long, value_enum)]
    sigma_mode: Option<SigmaFlag>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args)]
struct ResampleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, value_enum)]
    sigma_mode: Option<SigmaFlag>,
}

macro_rules! apply {
    ($target:expr, $value:expr) => {
        if let Some(v) = $value {
            $target = v;
        }
    };
}

fn apply_common(c: Common, seed: &mut u64, workers: &mut usize, out_dir: &mut PathBuf) {
    apply!(*seed, c.seed);
    apply!(*workers, c.workers);
    apply!(*out_dir, c.out_dir);
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Estimate(a) => {
            let mut cfg: EstimateConfig = load(a.common.config.as_deref())?;
            apply_common(a.common, &mut cfg.seed, &mut cfg.workers, &mut cfg.out_dir);
            if let Some(l) = a.lambda {
                cfg.harmonization.lambda = parse_lambda_grid(&l)?;
            }
            apply!(cfg.harmonization.sigma_mode, a.sigma_mode.map(SigmaMode::from));
            apply!(cfg.alpha, a.alpha);
            commands::estimate(&mut cfg)
        }
        Command::Simulate(a) => {
            let mut cfg: SimulateConfig = load(a.common.config.as_deref())?;
            apply_common(a.common, &mut cfg.seed, &mut cfg.workers, &mut cfg.out_dir);
            if let Some(p) = a.preset {
                cfg.preset = Some(p);
                cfg.scenario = None;
            }
            apply!(cfg.reps, a.reps);
            if let Some(l) = a.lambda {
                cfg.harmonization.lambda = parse_lambda_grid(&l)?;
            }
            apply!(cfg.harmonization.sigma_mode, a.sigma_mode.map(SigmaMode::from));
            apply!(cfg.alpha, a.alpha);
            commands::simulate(&mut cfg)
        }
        Command::Resample(a) => {
            let mut cfg: ResampleCliConfig = load(a.common.config.as_deref())?;
            apply_common(a.common, &mut cfg.seed, &mut cfg.workers, &mut cfg.out_dir);
            if let Some(p) = a.preset {
                cfg.preset = Some(p);
                cfg.trial = None;
                cfg.ec = None;
            }
            apply!(cfg.reps, a.reps);
            apply!(cfg.sigma_mode, a.sigma_mode.map(SigmaMode::from));
            commands::resample(&mut cfg)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
