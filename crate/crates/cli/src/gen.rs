use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Args;

use unwarp_core::synth::{build_dataset, BuildOptions, CategoryMix, CropCategory, MANIFEST_FILE};

use crate::{UsageError, DEFAULT_SEED};

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Number of samples.
    #[arg(long)]
    n: usize,
    /// Sample side length in pixels (square samples).
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Relative weights of complete, partial and boundary-free crops.
    #[arg(long, default_value = "1,1,1")]
    mix: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (0: all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Also write the flat rectified targets.
    #[arg(long)]
    targets: bool,
    #[arg(long)]
    force: bool,
}

/// Weights are normalised, so `1,1,1` and `0.2,0.2,0.2` mean the same mix.
fn parse_mix(s: &str) -> Result<CategoryMix> {
    let w = CategoryMix::parse_weights(s)?;
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        anyhow::bail!("{s:?}: weights must not all be zero");
    }
    Ok(CategoryMix::new(w.map(|x| x / total))?)
}

pub fn run(a: GenArgs) -> Result<()> {
    let mix = parse_mix(&a.mix).map_err(|e| UsageError(format!("--mix: {e}")))?;
    if a.size < 32 {
        return Err(UsageError(format!("--size {} is below the minimum of 32", a.size)).into());
    }
    let t = Instant::now();
    let rows = build_dataset(
        a.n,
        (a.size, a.size),
        &mix,
        &a.out,
        a.seed,
        &BuildOptions {
            force: a.force,
            jobs: a.jobs,
            write_targets: a.targets,
        },
    )
    .with_context(|| format!("generating dataset in {}", a.out.display()))?;
    let mut counts = [0usize; 3];
    for r in &rows {
        counts[CropCategory::ALL.iter().position(|&c| c == r.category).expect("known category")] += 1;
    }
    println!("{}", a.out.join(MANIFEST_FILE).display());
    let summary: Vec<String> = CropCategory::ALL
        .iter()
        .zip(counts)
        .map(|(c, n)| format!("{} {n}", c.name()))
        .collect();
    println!("{} samples ({}) in {:.1}s", rows.len(), summary.join(", "), t.elapsed().as_secs_f64());
    Ok(())
}
