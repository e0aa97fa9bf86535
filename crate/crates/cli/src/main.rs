mod commands;
mod config;
mod error;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Context;
use crate::config::RunConfig;
use crate::error::CliError;

/// Neural surrogate forecasting with ensemble data assimilation.
#[derive(Debug, Parser)]
#[command(name = "ensf", version)]
struct Cli {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the number of trial worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate training trajectories into <out>/data.
    Generate,
    /// Train the surrogate on <out>/data.
    Train,
    /// Run the configured methods against the trained surrogate.
    Filter,
    /// Aggregate trial logs into summary.csv, step_rmse.csv and rmse.svg.
    Report,
    /// generate, train, filter and report in sequence.
    Run,
    /// Print every configuration key with its default value.
    Defaults,
}

fn load(cli: &Cli) -> Result<Context, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::MissingInputs(vec![path.clone()]));
            }
            let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
            RunConfig::parse(&text).map_err(|e| match e {
                CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
                other => other,
            })?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.experiment.workers = w;
    }
    if let Some(o) = &cli.out {
        cfg.output.dir = o.clone();
    }
    cfg.validate()?;
    let out = cfg.output.dir.clone();
    Ok(Context { cfg, out })
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    if let Command::Defaults = cli.command {
        print!("{}", toml::to_string(&RunConfig::default()).expect("defaults serialize"));
        return Ok(());
    }
    let ctx = load(cli)?;
    match cli.command {
        Command::Generate => commands::generate(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Filter => commands::filter(&ctx),
        Command::Report => commands::report(&ctx).map(|_| ()),
        Command::Run => commands::run_all(&ctx),
        Command::Defaults => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
