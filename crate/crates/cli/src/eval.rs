use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;

use unwarp_core::flow::ValidityMask;
use unwarp_core::image::{write_atomic, ImageRaster};
use unwarp_core::metrics::{evaluate_set, format_aggregate, EvalPair, TextPair};

use crate::{ensure_writable, UsageError};

/// Pairs directory layout, per image id:
/// `<id>.rect.{ppm,pgm}` rectified output, `<id>.gt.{ppm,pgm}` ground truth,
/// optional `<id>.mask.pgm` (or `<id>.rect.mask.pgm`) validity mask and
/// optional `<id>.ref.txt` / `<id>.hyp.txt` text pair.
#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pairs: PathBuf,
    /// Directory receiving `report.csv` and `summary.json`.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    force: bool,
}

fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["ppm", "pgm", "pnm"]
        .iter()
        .map(|e| dir.join(format!("{stem}.{e}")))
        .find(|p| p.is_file())
}

fn read_text(path: &Path) -> Result<Option<String>> {
    if !path.is_file() {
        return Ok(None);
    }
    let s = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Some(s.trim_end_matches(['\n', '\r']).to_string()))
}

pub fn run(a: EvalArgs) -> Result<()> {
    if !a.pairs.is_dir() {
        return Err(UsageError(format!("{} is not a directory", a.pairs.display())).into());
    }
    let csv_path = a.out.join("report.csv");
    let json_path = a.out.join("summary.json");
    ensure_writable(&csv_path, a.force)?;
    ensure_writable(&json_path, a.force)?;

    let mut ids = BTreeMap::new();
    for entry in std::fs::read_dir(&a.pairs)? {
        let p = entry?.path();
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        for ext in ["ppm", "pgm", "pnm"] {
            if let Some(id) = name.strip_suffix(&format!(".rect.{ext}")) {
                ids.insert(id.to_string(), p.clone());
            }
        }
    }
    if ids.is_empty() {
        return Err(UsageError(format!("no <id>.rect.ppm images in {}", a.pairs.display())).into());
    }

    let mut pairs = Vec::new();
    let mut skipped = 0;
    for (id, rect_path) in &ids {
        let Some(gt_path) = find_image(&a.pairs, &format!("{id}.gt")) else {
            log::warn!("{id}: no ground truth, skipped");
            skipped += 1;
            continue;
        };
        let rectified = ImageRaster::read_netpbm(rect_path)?;
        let ground_truth = ImageRaster::read_netpbm(&gt_path)?;
        let validity = [format!("{id}.mask.pgm"), format!("{id}.rect.mask.pgm")]
            .iter()
            .map(|n| a.pairs.join(n))
            .find(|p| p.is_file())
            .map(|p| ImageRaster::read_netpbm(&p).map(|m| ValidityMask::from_raster(&m)))
            .transpose()?;
        let reference = read_text(&a.pairs.join(format!("{id}.ref.txt")))?;
        let hypothesis = read_text(&a.pairs.join(format!("{id}.hyp.txt")))?;
        let text = match (reference, hypothesis) {
            (Some(reference), Some(hypothesis)) => Some(TextPair { reference, hypothesis }),
            (None, None) => None,
            _ => {
                log::warn!("{id}: only one of .ref.txt/.hyp.txt present, text metrics skipped");
                None
            }
        };
        pairs.push(EvalPair {
            id: id.clone(),
            rectified,
            ground_truth,
            validity,
            text,
        });
    }
    if pairs.is_empty() {
        anyhow::bail!("no evaluable pairs ({skipped} skipped for missing ground truth)");
    }
    let mut report = evaluate_set(&pairs, a.jobs)?;
    report.counts.skipped = skipped;
    write_atomic(&csv_path, report.to_csv()?.as_bytes())?;
    write_atomic(&json_path, format!("{}\n", report.summary_json()).as_bytes())?;
    println!("{}", format_aggregate(&report.means));
    println!(
        "{} pairs evaluated, {} with text, {} skipped -> {}",
        report.counts.pairs,
        report.counts.cer,
        skipped,
        a.out.display()
    );
    Ok(())
}
