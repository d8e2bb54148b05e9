//! Sample assembly and on-disk datasets.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::crop::{classify_crop, sample_crop, CropCategory};
use super::distort::{generate_distortion, DistortionParams};
use super::render::render_document;
use super::SynthError;
use crate::flow::{compose_crop_flow, crop_preimage_box, read_wfl, warp, write_wfl, CropRect, ValidityMask, WarpFlow};
use crate::image::{write_atomic, ImageRaster};

pub const GENERATOR_VERSION: &str = "unwarp-synth/1";
/// Regeneration budget per sample before the build gives up.
pub const MAX_SAMPLE_ATTEMPTS: u64 = 64;
/// Mean absolute intensity gap allowed by the write-time consistency check.
pub const CONSISTENCY_TOLERANCE: f64 = 2e-2;
/// Largest coordinate jump between 4-neighbours of an emitted flow.
pub const MAX_FLOW_STEP: f32 = 10.0;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Category fractions in the order complete, partial, none.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryMix(pub [f64; 3]);

impl Default for CategoryMix {
    fn default() -> Self {
        Self([1.0 / 3.0; 3])
    }
}

impl CategoryMix {
    pub fn new(fractions: [f64; 3]) -> Result<Self, SynthError> {
        if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(SynthError::InvalidMix(format!("{fractions:?} must be non-negative and sum to 1")));
        }
        Ok(Self(fractions))
    }

    /// Parses `"a,b,c"` as exact fractions.
    pub fn parse(s: &str) -> Result<Self, SynthError> {
        Self::new(Self::parse_weights(s)?)
    }

    /// Parses `"a,b,c"` without checking the sum.
    pub fn parse_weights(s: &str) -> Result<[f64; 3], SynthError> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| SynthError::InvalidMix(format!("{s:?}: {e}")))?;
        let arr: [f64; 3] = parts
            .try_into()
            .map_err(|_| SynthError::InvalidMix(format!("{s:?}: expected three fractions")))?;
        if arr.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(SynthError::InvalidMix(format!("{s:?}: fractions must be non-negative")));
        }
        Ok(arr)
    }

    /// Exact per-category counts: floors plus largest-remainder top-up.
    pub fn quotas(&self, n: usize) -> [usize; 3] {
        let raw: Vec<f64> = self.0.iter().map(|f| f * n as f64).collect();
        let mut counts: [usize; 3] = std::array::from_fn(|i| (raw[i] + 1e-9).floor() as usize);
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| (raw[b] - counts[b] as f64).total_cmp(&(raw[a] - counts[a] as f64)));
        let mut left = n - counts.iter().sum::<usize>().min(n);
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            if self.0[i] > 0.0 {
                counts[i] += 1;
                left -= 1;
            }
        }
        counts
    }
}

/// Category of every sample index: quota counts in a seeded shuffle.
pub fn category_plan(n: usize, mix: &CategoryMix, seed: u64) -> Vec<CropCategory> {
    let q = mix.quotas(n);
    let mut plan: Vec<CropCategory> = CropCategory::ALL
        .iter()
        .zip(q)
        .flat_map(|(&c, k)| std::iter::repeat(c).take(k))
        .collect();
    plan.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x9A1A_0CE5));
    plan
}

/// Independent sub-seed for `(seed, index, attempt)`.
pub fn derive_seed(seed: u64, index: u64, attempt: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ index) ^ attempt.wrapping_mul(0xA24B_AED4_963E_E407))
}

#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub image: ImageRaster,
    pub flow: WarpFlow,
    pub category: CropCategory,
    pub crop: CropRect,
    pub seed: u64,
    pub generator_version: String,
}

/// A record plus the by-products that are not part of the dataset proper.
#[derive(Clone, Debug)]
pub struct GeneratedSample {
    pub record: SampleRecord,
    /// The flat page region the crop rectifies to, at sample size.
    pub target: ImageRaster,
    pub canvas: (usize, usize),
    /// Page mask on the distorted canvas.
    pub mask: ValidityMask,
    /// Bounding box of the crop's content, in page pixels.
    pub preimage: CropRect,
    /// Mean intensity gap measured by the consistency check.
    pub consistency: f64,
}

/// Mean absolute gap between `a` and `b` over pixels valid in both masks
/// whose 3×3 neighbourhood is valid in both too.
pub fn interior_agreement(a: &ImageRaster, ma: &ValidityMask, b: &ImageRaster, mb: &ValidityMask) -> Option<f64> {
    let (h, w, c) = (a.height(), a.width(), a.channel_count());
    let ok = |y: usize, x: usize| ma.get(y, x) && mb.get(y, x);
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if !(y - 1..=y + 1).all(|yy| (x - 1..=x + 1).all(|xx| ok(yy, xx))) {
                continue;
            }
            for ch in 0..c {
                total += (a.get(y, x, ch) as f64 - b.get(y, x, ch) as f64).abs();
            }
            count += c;
        }
    }
    (count > 0).then(|| total / count as f64)
}

/// Largest coordinate difference between 4-neighbours.
pub fn max_flow_step(flow: &WarpFlow) -> f32 {
    let (h, w) = (flow.height(), flow.width());
    let mut worst = 0.0f32;
    for map in [flow.u_map(), flow.v_map()] {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    worst = worst.max((map[i + 1] - map[i]).abs());
                }
                if y + 1 < h {
                    worst = worst.max((map[i + w] - map[i]).abs());
                }
            }
        }
    }
    worst
}

/// One generation attempt for a sample of `size = (H, W)` on a `2H × 2W` canvas.
pub fn generate_sample(seed: u64, category: CropCategory, size: (usize, usize)) -> Result<GeneratedSample, SynthError> {
    let (sh, sw) = size;
    if sh < 32 || sw < 32 {
        return Err(SynthError::InvalidParams(format!("sample size {sh}x{sw} below 32x32")));
    }
    let (ch, cw) = ((2 * sh).max(64), (2 * sw).max(64));
    let doc = render_document(seed, ch, cw);
    let params = DistortionParams::sample(seed, ch, cw, doc.page, doc.background_style);
    let dist = generate_distortion(&doc.image, &params)?;
    let crop = sample_crop(&dist.mask, category, seed)?;
    debug_assert_eq!(classify_crop(&dist.mask, &crop), Some(category));

    let page = doc.page;
    let page_flow = dist.full_flow.restrict(page.x0, page.y0, page.width(), page.height());
    let b = crop_preimage_box(&page_flow, &crop)?;

    // consistency oracle at native resolution
    let native = compose_crop_flow(&page_flow, &crop, b.height, b.width)?;
    let crop_img = dist.image.crop(crop.x, crop.y, crop.width, crop.height);
    let (via_crop, m_crop) = warp(&crop_img, &native, 0.0);
    let (via_full, m_full) = warp(&dist.image, &page_flow.restrict(b.x, b.y, b.width, b.height), 0.0);
    let consistency = interior_agreement(&via_crop, &m_crop, &via_full, &m_full).unwrap_or(f64::INFINITY);
    if consistency >= CONSISTENCY_TOLERANCE {
        return Err(SynthError::Inconsistent { gap: consistency });
    }

    let sx = sw as f64 / crop.width as f64;
    let sy = sh as f64 / crop.height as f64;
    let flow = compose_crop_flow(&page_flow, &crop, sh, sw)?
        .map_coords(|u, v| (((u as f64 + 0.5) * sx - 0.5) as f32, ((v as f64 + 0.5) * sy - 0.5) as f32));
    let step = max_flow_step(&flow);
    if step >= MAX_FLOW_STEP {
        return Err(SynthError::Discontinuous { step });
    }
    let target = doc
        .image
        .crop(page.x0 + b.x, page.y0 + b.y, b.width, b.height)
        .resize(sh, sw);
    Ok(GeneratedSample {
        record: SampleRecord {
            image: crop_img.resize(sh, sw),
            flow,
            category,
            crop,
            seed,
            generator_version: GENERATOR_VERSION.to_string(),
        },
        target,
        canvas: (ch, cw),
        mask: dist.mask,
        preimage: b,
        consistency,
    })
}

/// Generates sample `index`, re-drawing with fresh sub-seeds on infeasible geometry.
pub fn generate_indexed(seed: u64, index: u64, category: CropCategory, size: (usize, usize)) -> Result<GeneratedSample, SynthError> {
    let mut last = None;
    for attempt in 0..MAX_SAMPLE_ATTEMPTS {
        match generate_sample(derive_seed(seed, index, attempt), category, size) {
            Ok(s) => return Ok(s),
            Err(e) if e.is_retryable() => {
                log::debug!("sample {index} attempt {attempt}: {e}");
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(SynthError::Exhausted {
        index,
        attempts: MAX_SAMPLE_ATTEMPTS,
        last: last.map(|e| e.to_string()).unwrap_or_default(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub index: u64,
    pub seed: u64,
    pub category: CropCategory,
    pub crop: CropRect,
    pub image: String,
    pub flow: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    pub height: usize,
    pub width: usize,
    pub generator_version: String,
}

#[derive(Clone, Debug)]
pub struct BuildOptions {
    /// Overwrite an existing dataset.
    pub force: bool,
    /// Worker threads; 0 uses the rayon default.
    pub jobs: usize,
    /// Also write the flat rectified targets under `targets/`.
    pub write_targets: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            force: false,
            jobs: 0,
            write_targets: false,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `n` samples of `size` under `out_dir` and returns the manifest rows.
pub fn build_dataset(
    n: usize,
    size: (usize, usize),
    mix: &CategoryMix,
    out_dir: &Path,
    seed: u64,
    opts: &BuildOptions,
) -> Result<Vec<ManifestRow>, SynthError> {
    if n == 0 {
        return Err(SynthError::InvalidParams("dataset needs at least one sample".into()));
    }
    let manifest_path = out_dir.join(MANIFEST_FILE);
    if manifest_path.exists() && !opts.force {
        return Err(SynthError::Exists(manifest_path.display().to_string()));
    }
    for sub in ["images", "flows"].iter().chain(opts.write_targets.then_some(&"targets")) {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let plan = category_plan(n, mix, seed);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| SynthError::InvalidParams(format!("thread pool: {e}")))?;
    let rows: Vec<ManifestRow> = pool.install(|| {
        plan.par_iter()
            .enumerate()
            .map(|(i, &cat)| write_sample(out_dir, seed, i as u64, cat, size, opts.write_targets))
            .collect::<Result<_, _>>()
    })?;
    let mut text = String::new();
    for row in &rows {
        text.push_str(&serde_json::to_string(row).expect("manifest rows serialize"));
        text.push('\n');
    }
    write_atomic(&manifest_path, text.as_bytes()).map_err(io_err(&manifest_path))?;
    Ok(rows)
}

fn write_sample(
    out_dir: &Path,
    seed: u64,
    index: u64,
    category: CropCategory,
    size: (usize, usize),
    write_target: bool,
) -> Result<ManifestRow, SynthError> {
    let s = generate_indexed(seed, index, category, size)?;
    let image = format!("images/{index:06}.ppm");
    let flow = format!("flows/{index:06}.wfl");
    s.record.image.write_netpbm(&out_dir.join(&image))?;
    write_wfl(&out_dir.join(&flow), &s.record.flow, 0)?;
    let target = if write_target {
        let t = format!("targets/{index:06}.ppm");
        s.target.write_netpbm(&out_dir.join(&t))?;
        Some(t)
    } else {
        None
    };
    Ok(ManifestRow {
        index,
        seed: s.record.seed,
        category,
        crop: s.record.crop,
        image,
        flow,
        target,
        height: size.0,
        width: size.1,
        generator_version: GENERATOR_VERSION.to_string(),
    })
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>, SynthError> {
    let path = dir.join(MANIFEST_FILE);
    let file = fs::File::open(&path).map_err(io_err(&path))?;
    let mut rows = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| SynthError::Manifest {
            path: path.display().to_string(),
            line: lineno + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(rows)
}

/// A dataset entry loaded from disk.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub row: ManifestRow,
    pub record: SampleRecord,
    pub target: Option<ImageRaster>,
}

pub fn load_dataset(dir: &Path) -> Result<Vec<LoadedSample>, SynthError> {
    read_manifest(dir)?
        .into_iter()
        .map(|row| {
            let resolve = |p: &str| -> PathBuf { dir.join(p) };
            let image = ImageRaster::read_netpbm(&resolve(&row.image))?;
            let (flow, _) = read_wfl(&resolve(&row.flow))?;
            let target = row
                .target
                .as_deref()
                .map(|t| ImageRaster::read_netpbm(&resolve(t)))
                .transpose()?;
            Ok(LoadedSample {
                record: SampleRecord {
                    image,
                    flow,
                    category: row.category,
                    crop: row.crop,
                    seed: row.seed,
                    generator_version: row.generator_version.clone(),
                },
                target,
                row,
            })
        })
        .collect()
}
