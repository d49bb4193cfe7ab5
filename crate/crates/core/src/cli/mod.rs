//! The `ibmeta` command line.
//!
//! Exit codes: 0 success, 2 bad input (config, checkpoint, task file, flags),
//! 3 numerical abort during training, 4 streaming requested with a cosine
//! kernel.

mod commands;
mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{parse_grid, parse_shots};
pub use config::{parse_kv, KernelVariance, NetConfig, RunConfig};

use crate::error::Error;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "IBMETA_SEED";

#[derive(Parser, Debug)]
#[command(name = "ibmeta", version, about = "Information-bottleneck meta-learning with GP encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Meta-train a model; writes checkpoint, metrics.csv and config.resolved.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Few-shot scores with 95% confidence intervals, as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated shot counts or a range `a..b`.
        #[arg(long, default_value = "5,10,20")]
        shots: String,
        #[arg(long, default_value_t = 1000)]
        tasks: usize,
        /// Test-time adaptation steps for MAML checkpoints.
        #[arg(long)]
        inner_steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Predictions for the query points after conditioning on the support
    /// points, as CSV.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        support: PathBuf,
        #[arg(long)]
        query: PathBuf,
        /// Ingest the support points one at a time in constant memory.
        #[arg(long)]
        stream: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Posterior mean and std on a grid for nested support sets, as CSV.
    ExportCurves {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "1..7")]
        shots: String,
        /// `a:b:n`, n evenly spaced points from a to b.
        #[arg(long, default_value = "-5:5:100", allow_hyphen_values = true)]
        grid: String,
        #[arg(long, default_value_t = 1)]
        tasks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate one model per beta, as CSV.
    SweepBeta {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated beta values.
        #[arg(long)]
        betas: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        shots: Option<String>,
        #[arg(long, default_value_t = 100)]
        tasks: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::StreamRequiresLinearKernel => 4,
        Error::NonFinite(_) | Error::NonFiniteGradient(_) | Error::NotPositiveDefinite { .. } => 3,
        _ => 2,
    }
}

/// Runs the command line with `IBMETA_SEED` taken from the environment.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with_env(args, std::env::var(SEED_ENV).ok(), out, err)
}

pub fn run_with_env<I, T>(args: I, env_seed: Option<String>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    match commands::dispatch(cli.command, env_seed, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
