use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use cfura_core::harness::{run_command, Command, ExperimentConfig};
use cfura_core::Error;
use clap::{Args, Parser, Subcommand};

/// Cell-free unsourced random access: AMP, state evolution, detection and downlink rates.
#[derive(Debug, Parser)]
#[command(name = "cfura", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// State-evolution trace and fixed point only.
    Se(Common),
    /// Full pipeline: SE, AMP trials, detection, estimation, genie baseline and rates.
    Simulate(Common),
    /// Detection tradeoff sweep around the calibrated threshold.
    Roc(Common),
    /// Downlink rates, reusing cached moments when they match the config.
    Rates(Common),
    /// Genie-aided MMSE baseline only.
    Genie(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Overrides the number of Monte Carlo trials.
    #[arg(long, value_name = "N")]
    trials: Option<usize>,
    /// Overrides the output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for the trial pool.
    #[arg(long, value_name = "N", env = "CFURA_THREADS")]
    threads: Option<usize>,
}

fn load(args: &Common) -> cfura_core::Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(&args.config).map_err(|e| match e {
        // an unreadable config file is a usage problem, not a runtime one
        Error::Io { path, source } => Error::Config(format!("{}: {source}", path.display())),
        other => other,
    })?;
    cfg.with_overrides(args.seed, args.trials, args.out.clone())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (command, args) = match &cli.command {
        Cmd::Se(a) => (Command::Se, a),
        Cmd::Simulate(a) => (Command::Simulate, a),
        Cmd::Roc(a) => (Command::Roc, a),
        Cmd::Rates(a) => (Command::Rates, a),
        Cmd::Genie(a) => (Command::Genie, a),
    };
    let cfg = match load(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if args.threads == Some(0) {
        eprintln!("error: --threads must be positive");
        return ExitCode::from(2);
    }
    let result = run_command(&cfg, command, args.threads)
        .with_context(|| format!("{} failed (output in {})", command.name(), cfg.out_dir().display()));
    match result {
        Ok(manifest) => {
            for (k, v) in &manifest.summary {
                log::info!("{k} = {v}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
