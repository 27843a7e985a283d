mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fusionbench::Error;
use serde::Serialize;

use crate::config::Config;

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_DIVERGED: u8 = 4;
const EXIT_GRADCHECK: u8 = 5;

#[derive(Parser)]
#[command(name = "fusionbench", version, about = "Late-fusion strategy classification benchmark")]
struct Cli {
    /// TOML configuration; defaults apply to every omitted key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured global seed.
    #[arg(long, global = true, env = "FUSIONBENCH_SEED")]
    seed: Option<u64>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate once with the given seed.
    Run {
        #[arg(long)]
        data: PathBuf,
        /// Also write the trained parameters to this directory.
        #[arg(long)]
        save_model: Option<PathBuf>,
    },
    /// Repeat seeded runs until the accuracy CI is narrow enough.
    EvalLoop {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "FUSIONBENCH_JOBS", default_value_t = 1)]
        jobs: usize,
    },
    /// Rebuild the summary and plot files from an eval-loop directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks for every layer and model.
    Gradcheck {
        /// Deliberately corrupt matmul gradients (the check must fail).
        #[arg(long)]
        inject_fault: bool,
    },
    /// Parameter shapes and counts of the configured networks.
    ModelInfo,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::Divergence(_) => EXIT_DIVERGED,
        _ => 1,
    }
}

/// Writes the command's single JSON document to stdout. A closed pipe is
/// not an error.
fn emit<T: Serialize>(value: &T) {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value).expect("serializable");
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn execute(cli: Cli) -> Result<u8, Error> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Gen { out } => emit(&commands::gen(&cfg, &out)?),
        Command::Run { data, save_model } => emit(&commands::run(&cfg, &data, cfg.seed, save_model.as_deref())?),
        Command::EvalLoop { data, out, jobs } => {
            if jobs == 0 {
                return Err(Error::Config("--jobs must be positive".into()));
            }
            emit(&commands::eval_loop(&cfg, &data, &out, jobs)?)
        }
        Command::Report { out } => emit(&commands::report(&cfg, &out)?),
        Command::Gradcheck { inject_fault } => {
            let report = commands::gradcheck(&cfg, inject_fault)?;
            emit(&report);
            if !report.pass {
                for f in &report.failing {
                    eprintln!("gradient check failed: {f}");
                }
                return Ok(EXIT_GRADCHECK);
            }
        }
        Command::ModelInfo => emit(&commands::model_info(&cfg)?),
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
