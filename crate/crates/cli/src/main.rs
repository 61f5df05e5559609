//! `lsyk`: spectra, exceptional points, finite-size scaling and large-N
//! solutions of the dissipative SYK model.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Command, Failure};
use config::RunConfig;

/// Environment variable overriding the default worker count.
const WORKERS_ENV: &str = "LSYK_WORKERS";

#[derive(Parser)]
#[command(name = "lsyk", version, about = "Dissipative SYK spectral and large-N toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(clap::Args)]
struct Common {
    /// TOML file with any of the options below; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: RunConfig,
}

#[derive(Subcommand)]
enum Sub {
    /// Eigenvalues of one Liouvillian block per μ.
    Spectrum(Common),
    /// Dissipative gap of one realization per μ.
    GapScan(Common),
    /// Branch tracking and exceptional points along a μ grid.
    EpScan(Common),
    /// Disorder ensemble and 1/N_tot extrapolation of the gap.
    Scaling(Common),
    /// Large-N saddle points: actions, transitions and decay rates.
    SdSolve(Common),
    /// Closed-form and sampling checks of the pipeline.
    Oracle(Common),
}

fn workers(cfg: &RunConfig) -> Result<Option<usize>, String> {
    if let Some(w) = cfg.workers {
        return Ok(Some(w));
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| format!("{WORKERS_ENV} must be a positive integer, got `{v}`")),
        Err(_) => Ok(None),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, common) = match cli.command {
        Sub::Spectrum(c) => (Command::Spectrum, c),
        Sub::GapScan(c) => (Command::GapScan, c),
        Sub::EpScan(c) => (Command::EpScan, c),
        Sub::Scaling(c) => (Command::Scaling, c),
        Sub::SdSolve(c) => (Command::SdSolve, c),
        Sub::Oracle(c) => (Command::Oracle, c),
    };
    let usage_error = |msg: String| {
        eprintln!("error: {msg}");
        ExitCode::from(2)
    };
    let base = match &common.config {
        Some(p) => match RunConfig::load(p) {
            Ok(c) => c,
            Err(e) => return usage_error(e),
        },
        None => RunConfig::default(),
    };
    let cfg = base.overlay(&common.flags);
    match workers(&cfg) {
        Ok(Some(0)) => return usage_error("worker count must be at least 1".into()),
        Ok(Some(w)) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        }
        Ok(None) => {}
        Err(e) => return usage_error(e),
    }
    match commands::run(cmd, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => usage_error(msg),
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
