//! Crop sampling for the three boundary categories.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::flow::{CropRect, ValidityMask, MIN_CROP_SIDE};

pub const CROP_MARGIN: usize = 2;
pub const CROP_ATTEMPTS: usize = 1000;
/// Crop side range as a fraction of the canvas extent.
pub const CROP_SIDE_RANGE: (f64, f64) = (0.35, 0.9);
/// Smallest page fraction of a partial crop, so it is not all background.
pub const MIN_PARTIAL_COVERAGE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropCategory {
    /// The whole document with all four boundaries.
    Complete,
    /// Some boundaries cut by the crop.
    Partial,
    /// Document interior only; no boundary visible.
    #[serde(rename = "none")]
    Interior,
}

impl CropCategory {
    pub const ALL: [CropCategory; 3] = [CropCategory::Complete, CropCategory::Partial, CropCategory::Interior];

    pub fn name(self) -> &'static str {
        match self {
            CropCategory::Complete => "complete",
            CropCategory::Partial => "partial",
            CropCategory::Interior => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

impl fmt::Display for CropCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Summed-area table over a boolean mask.
struct Integral {
    w: usize,
    sums: Vec<u32>,
}

impl Integral {
    fn new(mask: &ValidityMask) -> Self {
        let (h, w) = (mask.height(), mask.width());
        let mut sums = vec![0u32; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += mask.get(y, x) as u32;
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Self { w: w + 1, sums }
    }

    /// Count of true pixels in `[x0, x1) × [y0, y1)`.
    fn count(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> u32 {
        let s = |y: usize, x: usize| self.sums[y * self.w + x];
        s(y1, x1) + s(y0, x0) - s(y0, x1) - s(y1, x0)
    }
}

fn bounding_box(mask: &ValidityMask) -> Option<(usize, usize, usize, usize)> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    (x0 != usize::MAX).then_some((x0, y0, x1, y1))
}

/// Boundary category of a crop against a page mask, or `None` if the crop
/// fits no category.
pub fn classify_crop(mask: &ValidityMask, crop: &CropRect) -> Option<CropCategory> {
    let bbox = bounding_box(mask)?;
    classify_with(mask, &Integral::new(mask), bbox, crop)
}

fn classify_with(
    mask: &ValidityMask,
    integral: &Integral,
    (bx0, by0, bx1, by1): (usize, usize, usize, usize),
    crop: &CropRect,
) -> Option<CropCategory> {
    let (cx1, cy1) = (crop.x + crop.width, crop.y + crop.height);
    if cx1 > mask.width() || cy1 > mask.height() {
        return None;
    }
    let m = CROP_MARGIN;
    if bx0 >= crop.x + m && by0 >= crop.y + m && bx1 + 1 + m <= cx1 && by1 + 1 + m <= cy1 {
        return Some(CropCategory::Complete);
    }
    // interior: the crop grown by the margin lies inside the canvas and the mask
    if crop.x >= m && crop.y >= m && cx1 + m <= mask.width() && cy1 + m <= mask.height() {
        let grown = ((crop.width + 2 * m) * (crop.height + 2 * m)) as u32;
        if integral.count(crop.x - m, crop.y - m, cx1 + m, cy1 + m) == grown {
            return Some(CropCategory::Interior);
        }
    }
    let inside = integral.count(crop.x, crop.y, cx1, cy1);
    let area = (crop.width * crop.height) as u32;
    let total = integral.count(0, 0, mask.width(), mask.height());
    // mixed rectangle ⇒ it contains an adjacent true/false pair, i.e. a boundary
    let mixed = inside > 0 && inside < area;
    let cut = inside < total;
    if mixed && cut && inside as f64 >= MIN_PARTIAL_COVERAGE * area as f64 {
        return Some(CropCategory::Partial);
    }
    None
}

/// Rejection-samples a crop of the requested category.
///
/// Side lengths are uniform over the part of the configured range that the
/// category can satisfy given the mask's bounding box; positions are uniform
/// over the placements that keep the box constraint. Each draw is then
/// checked with [`classify_crop`].
pub fn sample_crop(mask: &ValidityMask, category: CropCategory, seed: u64) -> Result<CropRect, SynthError> {
    let infeasible = || SynthError::InfeasibleCrop {
        category,
        attempts: CROP_ATTEMPTS,
    };
    let bbox = bounding_box(mask).ok_or_else(infeasible)?;
    let integral = Integral::new(mask);
    let (h, w) = (mask.height(), mask.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC409_5EED);
    let side_range = |extent: usize| {
        let lo = ((CROP_SIDE_RANGE.0 * extent as f64).ceil() as usize).max(MIN_CROP_SIDE);
        let hi = ((CROP_SIDE_RANGE.1 * extent as f64).floor() as usize).min(extent);
        (lo, hi)
    };
    let (wlo, whi) = side_range(w);
    let (hlo, hhi) = side_range(h);
    let (bx0, by0, bx1, by1) = bbox;
    let m = CROP_MARGIN;

    // per-axis feasible side range and origin range for a given side
    type Axis = (usize, usize, usize, usize, usize);
    let axis_bounds = |(lo, hi, b0, b1, extent): Axis, side: Option<usize>| -> Option<((usize, usize), (usize, usize))> {
        match category {
            CropCategory::Complete => {
                let need = b1 - b0 + 1 + 2 * m;
                let slo = lo.max(need);
                let s = side.unwrap_or(slo);
                if slo > hi || s > extent {
                    return None;
                }
                // origin ∈ [b1 + 1 + m − s, b0 − m] ∩ [0, extent − s]
                let omin = (b1 + 1 + m).saturating_sub(s);
                let omax = b0.checked_sub(m)?.min(extent - s);
                (omin <= omax).then_some(((slo, hi), (omin, omax)))
            }
            CropCategory::Interior => {
                let span = (b1 + 1).saturating_sub(b0);
                let shi = hi.min(span.saturating_sub(2 * m));
                let s = side.unwrap_or(lo);
                if lo > shi {
                    return None;
                }
                let omin = b0 + m;
                let omax = (b1 + 1).checked_sub(m + s)?;
                (omin <= omax).then_some(((lo, shi), (omin, omax)))
            }
            CropCategory::Partial => {
                let s = side.unwrap_or(lo);
                (lo <= hi && s <= extent).then_some(((lo, hi), (0, extent - s)))
            }
        }
    };
    let xa: Axis = (wlo, whi, bx0, bx1, w);
    let ya: Axis = (hlo, hhi, by0, by1, h);
    let ((wmin, wmax), _) = axis_bounds(xa, None).ok_or_else(infeasible)?;
    let ((hmin, hmax), _) = axis_bounds(ya, None).ok_or_else(infeasible)?;
    for _ in 0..CROP_ATTEMPTS {
        let cw = rng.gen_range(wmin..=wmax);
        let ch = rng.gen_range(hmin..=hmax);
        let (Some((_, (xmin, xmax))), Some((_, (ymin, ymax)))) = (axis_bounds(xa, Some(cw)), axis_bounds(ya, Some(ch))) else {
            continue;
        };
        let crop = CropRect {
            x: rng.gen_range(xmin..=xmax),
            y: rng.gen_range(ymin..=ymax),
            width: cw,
            height: ch,
        };
        if classify_with(mask, &integral, bbox, &crop) == Some(category) {
            return Ok(crop);
        }
    }
    Err(infeasible())
}
