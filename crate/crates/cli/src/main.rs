//! `unwarp`: synthetic data generation, training, rectification and
//! evaluation from the command line.

mod eval;
mod gen;
mod rectify;
mod train;

use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};

use unwarp_core::model::Precision;

/// Fixed default seed so runs are reproducible without flags.
pub const DEFAULT_SEED: u64 = 20_240_601;

#[derive(Debug, Parser)]
#[command(name = "unwarp", version, about = "Document image rectification with backward warping flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic training set (images, flows, manifest).
    GenData(gen::GenArgs),
    /// Train (or resume training) a rectification network.
    Train(train::TrainArgs),
    /// Rectify one image or every image in a directory.
    Rectify(rectify::RectifyArgs),
    /// Score rectified images against their ground truth.
    Eval(eval::EvalArgs),
}

/// Compute precision from `UNWARP_PRECISION` (default `f32`).
pub fn precision_from_env() -> Result<Precision> {
    match std::env::var("UNWARP_PRECISION") {
        Err(_) => Ok(Precision::F32),
        Ok(v) => match v.trim().to_ascii_lowercase().as_str() {
            "" | "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(UsageError(format!("UNWARP_PRECISION must be f32 or f64, got {other:?}")).into()),
        },
    }
}

/// Errors that should exit with the usage status.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Refuses to clobber an existing output unless `force` is set.
pub fn ensure_writable(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!("{} already exists (pass --force to overwrite)", path.display());
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen::run(a),
        Command::Train(a) => train::run(a),
        Command::Rectify(a) => rectify::run(a),
        Command::Eval(a) => eval::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
