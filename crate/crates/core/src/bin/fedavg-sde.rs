//! Command-line front end for batch experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedavg_sde::experiment::{self, exit_code};
use fedavg_sde::Error;

/// Environment variable capping the worker thread count.
const THREADS_ENV: &str = "FEDSDE_THREADS";

#[derive(Parser)]
#[command(name = "fedavg-sde", version, about = "Federated averaging simulations, diffusion approximations and bound checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write its artifacts.
    Run {
        config: PathBuf,
        /// Output directory; overrides the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (default: FEDSDE_THREADS, else all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// List every problem in a config without running it.
    Validate { config: PathBuf },
}

fn report(err: &Error) -> ExitCode {
    match err {
        Error::Config(lines) => lines.iter().for_each(|l| eprintln!("error: {l}")),
        e => eprintln!("error: {e}"),
    }
    ExitCode::from(exit_code(err) as u8)
}

fn threads(flag: Option<usize>) -> Result<Option<usize>, Error> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Error::Config(vec![format!("{THREADS_ENV} must be a positive integer, got {v:?}")])),
        Err(_) => Ok(None),
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Validate { config } => match experiment::validate_file(&config) {
            Ok(d) if d.is_empty() => {
                println!("ok");
                ExitCode::SUCCESS
            }
            Ok(d) => {
                d.iter().for_each(|l| println!("{l}"));
                ExitCode::from(2)
            }
            Err(e) => report(&e),
        },
        Command::Run { config, out, threads: flag } => {
            let result = threads(flag).and_then(|n| {
                if let Some(n) = n {
                    if n == 0 {
                        return Err(Error::Config(vec!["thread count must be >= 1".into()]));
                    }
                    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::InvalidArgument(e.to_string()))?;
                }
                let cfg = experiment::load_config(&config)?;
                let dir = experiment::output_dir(&cfg, out.as_deref());
                let manifest = experiment::run(&cfg, &dir)?;
                println!("wrote {} artifacts to {}", manifest.artifacts.len() + 1, dir.display());
                Ok(())
            });
            match result {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => report(&e),
            }
        }
    }
}
