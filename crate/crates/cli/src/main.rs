//! `mgdun`: synthetic data, classical reconstruction, training, evaluation
//! and self-tests for model-guided multi-contrast super-resolution.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::error;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "mgdun", version, about, after_long_help = config::keys_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable, applied after --config.
    #[arg(long = "set", short = 's', global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; must be empty or absent unless --force is given.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed` from the configuration.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset of (X, Y, Z) triples with a hashed manifest.
    Synth,
    /// Run the splitting solver on every problem of `data`.
    Classical,
    /// Train the unfolded network on `data`, optionally sweeping T and INN depth.
    Train,
    /// Evaluate a checkpoint (or bicubic upsampling) on `data`.
    Eval,
    /// Run the invariant suite; exits non-zero if any property fails.
    Selftest {
        /// Deliberately break one component to confirm the suite catches it.
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FaultArg {
    BlurAdjoint,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("MGDUN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("MGDUN_THREADS must be a positive integer, got `{v}`")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for kv in &cli.set {
        cfg.apply_assignment(kv)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let cfg = load_config(&cli)?;
    let out = || {
        cli.out
            .clone()
            .ok_or_else(|| CliError::Config("--out DIR is required for this command".into()))
    };
    match cli.command {
        Command::Synth => commands::synth(&cfg, &commands::OutDir::prepare(out()?, cli.force)?),
        Command::Classical => commands::classical(&cfg, &commands::OutDir::prepare(out()?, cli.force)?),
        Command::Train => commands::train(&cfg, &commands::OutDir::prepare(out()?, cli.force)?),
        Command::Eval => commands::eval(&cfg, &commands::OutDir::prepare(out()?, cli.force)?),
        Command::Selftest { inject_fault } => {
            let dir = cli
                .out
                .clone()
                .map(|d| commands::OutDir::prepare(d, cli.force))
                .transpose()?;
            let fault = inject_fault.map(|f| match f {
                FaultArg::BlurAdjoint => mgdun::selftest::Fault::BlurAdjoint,
            });
            commands::selftest(&cfg, dir.as_ref(), fault)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
