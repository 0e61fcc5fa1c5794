//! `measure-dyn`: batch driver for the density, moment, hedge and Monte-Carlo
//! engines.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{out_dir, Run};
use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] measure_dyn::Error),
}

impl CliError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 config, 2 numerical, 3 I/O.
    fn exit_code(&self) -> u8 {
        use measure_dyn::Error as E;
        match self {
            CliError::Config { .. } => 1,
            CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                E::Config { .. } | E::Domain(_) => 1,
                E::Numerical(_) | E::Range(_) | E::State(_) => 2,
                E::Io(_) => 3,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "measure-dyn",
    version,
    about = "Conditional P&L distributions of hedged derivative positions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `run.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Monte-Carlo seed; overrides `mc.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only report errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Evolve the terminal density back to t0 under the configured hedge.
    Evolve,
    /// Mean, variance and third-moment surfaces.
    Moments,
    /// Variance-minimising hedge table and the minimal variance surface.
    HedgeVar,
    /// Quantile-maximising hedge by backward dynamic programming.
    HedgeQuantile,
    /// Monte-Carlo distribution of the hedged position at t0.
    Mc,
    /// Grid against Monte-Carlo at the spot: moments, quantiles, KS distance.
    Compare,
}

fn threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("MEASURE_DYN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| {
        CliError::config(
            "MEASURE_DYN_THREADS",
            format!("expected a thread count, got `{raw}`"),
        )
    })?;
    if n > 0 {
        // fails only if a pool already exists, which cannot happen this early
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    threads()?;
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::config("--config", "a configuration file is required"))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.mc.seed = seed;
    }
    let out = out_dir(cli.out.as_deref(), &cfg);
    let run = Run::new(cfg, out, cli.quiet)?;
    match cli.command {
        Command::Evolve => run.evolve(),
        Command::Moments => run.moments(),
        Command::HedgeVar => run.hedge_var(),
        Command::HedgeQuantile => run.hedge_quantile(),
        Command::Mc => run.mc(),
        Command::Compare => run.compare(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // usage errors are configuration errors; help and version are not
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
