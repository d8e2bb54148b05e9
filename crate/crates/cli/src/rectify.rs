use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Args;

use unwarp_core::flow::write_wfl;
use unwarp_core::image::ImageRaster;
use unwarp_core::model::{rectify_with, Checkpoint, Precision, Rectified};

use crate::{ensure_writable, precision_from_env, UsageError};

#[derive(Debug, Args)]
pub struct RectifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input PPM/PGM file, or a directory of them.
    #[arg(long)]
    input: PathBuf,
    /// Output file (or directory in batch mode).
    #[arg(long)]
    out: PathBuf,
    /// Also write the native-resolution flow as `<out>.wfl`.
    #[arg(long)]
    dump_flow: bool,
    /// Also write the validity mask as `<out>.mask.pgm`.
    #[arg(long)]
    dump_mask: bool,
    #[arg(long)]
    force: bool,
}

fn is_netpbm(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm" | "pnm"))
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}

pub fn run(a: RectifyArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let precision = precision_from_env()?;
    let jobs: Vec<(PathBuf, PathBuf)> = if a.input.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&a.input)
            .with_context(|| format!("reading {}", a.input.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_netpbm(p))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(UsageError(format!("{} contains no .ppm/.pgm images", a.input.display())).into());
        }
        std::fs::create_dir_all(&a.out)?;
        files
            .into_iter()
            .map(|f| {
                let out = a.out.join(f.file_name().expect("file name"));
                (f, out)
            })
            .collect()
    } else {
        vec![(a.input.clone(), a.out.clone())]
    };
    for (_, out) in &jobs {
        ensure_writable(out, a.force)?;
        if a.dump_flow {
            ensure_writable(&sidecar(out, ".wfl"), a.force)?;
        }
        if a.dump_mask {
            ensure_writable(&sidecar(out, ".mask.pgm"), a.force)?;
        }
    }
    let total = Instant::now();
    for (input, out) in &jobs {
        let t = Instant::now();
        let img = ImageRaster::read_netpbm(input)?;
        let r: Rectified = match precision {
            Precision::F32 => rectify_with::<f32>(&img, &ck.config, &ck.params)?,
            Precision::F64 => rectify_with::<f64>(&img, &ck.config, &ck.params.cast())?,
        };
        r.image.write_netpbm(out)?;
        if a.dump_flow {
            write_wfl(&sidecar(out, ".wfl"), &r.flow, 0)?;
        }
        if a.dump_mask {
            r.mask.to_raster().write_netpbm(&sidecar(out, ".mask.pgm"))?;
        }
        println!(
            "{} -> {} ({}x{}, {:.0} ms)",
            input.display(),
            out.display(),
            img.width(),
            img.height(),
            t.elapsed().as_secs_f64() * 1e3
        );
    }
    if jobs.len() > 1 {
        println!("{} images in {:.2}s", jobs.len(), total.elapsed().as_secs_f64());
    }
    Ok(())
}
