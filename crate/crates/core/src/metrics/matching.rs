//! Dense correspondence by coarse-to-fine descriptor search.
//!
//! Every pixel is described by a 4×4 grid of cells, each an 8-bin histogram
//! of gradient orientations weighted by magnitude (the dense-SIFT layout).
//! Per level, the rectified image's cell maps are warped by the current
//! field and a ±`radius` integer search minimises the descriptor SSD; the
//! minimum is refined with a parabola per axis and the field is median
//! filtered before moving to the next finer level.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use super::gray::GrayImage;
use super::MetricsError;
use crate::flow::ValidityMask;

const BINS: usize = 8;
const CELLS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub levels: usize,
    /// Integer search radius per level, in that level's pixels.
    pub radius: usize,
    /// Cell side in pixels; the descriptor spans `4 · cell`.
    pub cell: usize,
    /// Minimum mean squared cell norm for a ground-truth pixel to count as
    /// matchable (blank regions carry no descriptor).
    pub min_energy: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            radius: 4,
            cell: 4,
            min_energy: 0.02,
        }
    }
}

/// Per-pixel displacement from the ground-truth image to the rectified one:
/// ground-truth pixel `(x, y)` matches rectified `(x + dx, y + dy)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub height: usize,
    pub width: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DisplacementField {
    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            dx: vec![dx; n],
            dy: vec![dy; n],
            valid: vec![true; n],
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Mean endpoint error against another field over pixels valid in both.
    pub fn endpoint_error(&self, truth: &DisplacementField) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..self.dx.len().min(truth.dx.len()) {
            if self.valid[i] && truth.valid[i] {
                sum += (self.dx[i] - truth.dx[i]).hypot(self.dy[i] - truth.dy[i]);
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// Normalized orientation-histogram cell maps, `[h·w·8]` interleaved.
struct CellMaps {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl CellMaps {
    fn build(img: &GrayImage, cell: usize) -> Self {
        let (h, w) = (img.height(), img.width());
        let mut hist = vec![0.0; h * w * BINS];
        for y in 0..h {
            for x in 0..w {
                let (yi, xi) = (y as isize, x as isize);
                let gx = 0.5 * (img.clamped(yi, xi + 1) - img.clamped(yi, xi - 1));
                let gy = 0.5 * (img.clamped(yi + 1, xi) - img.clamped(yi - 1, xi));
                let mag = gx.hypot(gy);
                if mag == 0.0 {
                    continue;
                }
                let t = gy.atan2(gx).rem_euclid(TAU) / TAU * BINS as f64;
                let b0 = t.floor();
                let f = t - b0;
                let b0 = b0 as usize % BINS;
                let o = (y * w + x) * BINS;
                hist[o + b0] += mag * (1.0 - f);
                hist[o + (b0 + 1) % BINS] += mag * f;
            }
        }
        let pooled = box_pool(&hist, h, w, cell);
        let norms: Vec<f64> = pooled
            .chunks(BINS)
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        // keep near-flat cells near zero instead of amplifying noise
        let eps = 0.1 * norms.iter().sum::<f64>() / norms.len().max(1) as f64 + 1e-12;
        let data = pooled
            .chunks(BINS)
            .zip(&norms)
            .flat_map(|(c, n)| c.iter().map(move |v| v / (n + eps)).collect::<Vec<_>>())
            .collect();
        Self { h, w, data }
    }

    #[inline]
    fn cell(&self, y: isize, x: isize) -> &[f64] {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        &self.data[(y * self.w + x) * BINS..][..BINS]
    }

    /// Bilinear resample at `p + field(p)` with border clamping.
    fn warped(&self, dx: &[f64], dy: &[f64]) -> CellMaps {
        let (h, w) = (self.h, self.w);
        let mut data = vec![0.0; h * w * BINS];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (u, v) = (x as f64 + dx[i], y as f64 + dy[i]);
                let (x0, y0) = (u.floor(), v.floor());
                let (fx, fy) = (u - x0, v - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let out = &mut data[i * BINS..(i + 1) * BINS];
                for (yy, xx, wt) in [
                    (y0, x0, (1.0 - fx) * (1.0 - fy)),
                    (y0, x0 + 1, fx * (1.0 - fy)),
                    (y0 + 1, x0, (1.0 - fx) * fy),
                    (y0 + 1, x0 + 1, fx * fy),
                ] {
                    if wt == 0.0 {
                        continue;
                    }
                    for (o, s) in out.iter_mut().zip(self.cell(yy, xx)) {
                        *o += wt * s;
                    }
                }
            }
        }
        CellMaps { h, w, data }
    }
}

/// `cell × cell` box sum per channel (window `[-cell/2, cell - cell/2)`), clamped.
fn box_pool(hist: &[f64], h: usize, w: usize, cell: usize) -> Vec<f64> {
    let lo = (cell / 2) as isize;
    let offs: Vec<isize> = (0..cell as isize).map(|k| k - lo).collect();
    let cx = |x: isize| x.clamp(0, w as isize - 1) as usize;
    let cy = |y: isize| y.clamp(0, h as isize - 1) as usize;
    let mut rows = vec![0.0; h * w * BINS];
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) * BINS;
            for &d in &offs {
                let s = (y * w + cx(x as isize + d)) * BINS;
                for b in 0..BINS {
                    rows[o + b] += hist[s + b];
                }
            }
        }
    }
    let mut out = vec![0.0; h * w * BINS];
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) * BINS;
            for &d in &offs {
                let s = (cy(y as isize + d) * w + x) * BINS;
                for b in 0..BINS {
                    out[o + b] += rows[s + b];
                }
            }
        }
    }
    out
}

/// Cell-centre offsets of the 4×4 descriptor grid.
fn cell_offsets(cell: usize) -> [isize; CELLS] {
    let c = cell as isize;
    // centres at ±c/2 and ±3c/2, rounded towards the pixel grid
    [-(3 * c) / 2, -c / 2, c / 2, (3 * c) / 2]
}

/// Per-pixel squared distance between ground-truth cell `q` and warped
/// rectified cell `q + r`.
#[inline]
fn cell_cost(a: &CellMaps, b: &CellMaps, y: isize, x: isize, ry: isize, rx: isize) -> f64 {
    let ca = a.cell(y, x);
    let cb = b.cell(y + ry, x + rx);
    ca.iter().zip(cb).map(|(p, q)| (p - q) * (p - q)).sum()
}

fn descriptor_cost(a: &CellMaps, b: &CellMaps, offs: &[isize; CELLS], y: usize, x: usize, ry: isize, rx: isize) -> f64 {
    let mut s = 0.0;
    for &oy in offs {
        let qy = (y as isize + oy).clamp(0, a.h as isize - 1);
        for &ox in offs {
            let qx = (x as isize + ox).clamp(0, a.w as isize - 1);
            s += cell_cost(a, b, qy, qx, ry, rx);
        }
    }
    s
}

/// Descriptor cost map of one integer residual, by separable strided sums.
fn cost_map(a: &CellMaps, b: &CellMaps, offs: &[isize; CELLS], ry: isize, rx: isize, out: &mut [f64], tmp: &mut [f64], e: &mut [f64]) {
    let (h, w) = (a.h, a.w);
    for y in 0..h {
        for x in 0..w {
            e[y * w + x] = cell_cost(a, b, y as isize, x as isize, ry, rx);
        }
    }
    let cx = |x: isize| x.clamp(0, w as isize - 1) as usize;
    let cy = |y: isize| y.clamp(0, h as isize - 1) as usize;
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = offs.iter().map(|&o| e[y * w + cx(x as isize + o)]).sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = offs.iter().map(|&o| tmp[cy(y as isize + o) * w + x]).sum();
        }
    }
}

fn median3(v: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    let mut win = [0.0; 9];
    for y in 0..h {
        for x in 0..w {
            let mut k = 0;
            for dy in -1isize..=1 {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                for dx in -1isize..=1 {
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    win[k] = v[yy * w + xx];
                    k += 1;
                }
            }
            win.sort_by(|a, b| a.total_cmp(b));
            out[y * w + x] = win[4];
        }
    }
    out
}

/// Bilinear, pixel-centre aligned upsampling of a field, rescaling the
/// displacements to the finer grid.
fn upsample_field(d: &[f64], h: usize, w: usize, oh: usize, ow: usize, scale: f64) -> Vec<f64> {
    let up = crate::autodiff::kernels::resize_hwc(d, h, w, 1, oh, ow, crate::autodiff::EdgeMode::Clamp);
    up.into_iter().map(|v| v * scale).collect()
}

/// Field from `gt` to `rectified` (equal extents). Constant images yield a
/// field flagged invalid everywhere.
pub fn dense_match(gt: &GrayImage, rectified: &GrayImage) -> Result<DisplacementField, MetricsError> {
    dense_match_with(gt, rectified, &MatchConfig::default())
}

pub fn dense_match_with(gt: &GrayImage, rectified: &GrayImage, cfg: &MatchConfig) -> Result<DisplacementField, MetricsError> {
    gt.same_extents(rectified)?;
    let (h, w) = (gt.height(), gt.width());
    let mut field = DisplacementField::constant(h, w, 0.0, 0.0);
    if gt.variance() < 1e-12 || rectified.variance() < 1e-12 || h == 0 || w == 0 {
        field.valid.iter_mut().for_each(|v| *v = false);
        return Ok(field);
    }
    let mut pyr = vec![(gt.clone(), rectified.clone())];
    while pyr.len() < cfg.levels.max(1) {
        let (a, b) = pyr.last().expect("level");
        if a.height().min(a.width()) < 32 {
            break;
        }
        let next = (a.downsample2(), b.downsample2());
        pyr.push(next);
    }
    let offs = cell_offsets(cfg.cell);
    let r = cfg.radius as isize;
    let (mut dx, mut dy) = (Vec::new(), Vec::new());
    let (mut ph, mut pw) = (0usize, 0usize);
    let mut energy = Vec::new();
    for (li, (a_img, b_img)) in pyr.iter().enumerate().rev() {
        let (lh, lw) = (a_img.height(), a_img.width());
        if dx.is_empty() {
            dx = vec![0.0; lh * lw];
            dy = vec![0.0; lh * lw];
        } else {
            dx = upsample_field(&dx, ph, pw, lh, lw, lw as f64 / pw as f64);
            dy = upsample_field(&dy, ph, pw, lh, lw, lh as f64 / ph as f64);
        }
        let a = CellMaps::build(a_img, cfg.cell);
        let b = CellMaps::build(b_img, cfg.cell).warped(&dx, &dy);
        let n = lh * lw;
        let mut best = vec![f64::INFINITY; n];
        let mut arg = vec![(0isize, 0isize); n];
        let (mut cost, mut tmp, mut e) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for ry in -r..=r {
            for rx in -r..=r {
                cost_map(&a, &b, &offs, ry, rx, &mut cost, &mut tmp, &mut e);
                for i in 0..n {
                    // ties go to the smaller residual
                    let c = cost[i];
                    let (by, bx) = arg[i];
                    if c < best[i] || (c == best[i] && ry.abs() + rx.abs() < by.abs() + bx.abs()) {
                        best[i] = c;
                        arg[i] = (ry, rx);
                    }
                }
            }
        }
        for y in 0..lh {
            for x in 0..lw {
                let i = y * lw + x;
                let (ry, rx) = arg[i];
                let c0 = best[i];
                let refine = |lo: Option<f64>, hi: Option<f64>| match (lo, hi) {
                    // only a strict, inexact minimum is refined: flat plateaus
                    // and exact matches stay on the integer grid
                    (Some(m), Some(p)) if m > c0 && p > c0 && c0 > 1e-12 * (m + p) => {
                        let den = m - 2.0 * c0 + p;
                        if den > 1e-12 {
                            (0.5 * (m - p) / den).clamp(-0.5, 0.5)
                        } else {
                            0.0
                        }
                    }
                    _ => 0.0,
                };
                let at = |yy: isize, xx: isize| {
                    (yy.abs() <= r && xx.abs() <= r).then(|| descriptor_cost(&a, &b, &offs, y, x, yy, xx))
                };
                let sx = refine(at(ry, rx - 1), at(ry, rx + 1));
                let sy = refine(at(ry - 1, rx), at(ry + 1, rx));
                dx[i] += rx as f64 + sx;
                dy[i] += ry as f64 + sy;
            }
        }
        dx = median3(&dx, lh, lw);
        dy = median3(&dy, lh, lw);
        if li == 0 {
            energy = (0..n)
                .map(|i| {
                    let (y, x) = (i / lw, i % lw);
                    let mut s = 0.0;
                    for &oy in &offs {
                        for &ox in &offs {
                            s += a.cell(y as isize + oy, x as isize + ox).iter().map(|v| v * v).sum::<f64>();
                        }
                    }
                    s / (CELLS * CELLS) as f64
                })
                .collect();
        }
        ph = lh;
        pw = lw;
    }
    for i in 0..h * w {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        let (u, v) = (x + dx[i], y + dy[i]);
        let inside = u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64;
        field.valid[i] = inside && energy[i] >= cfg.min_energy && dx[i].is_finite() && dy[i].is_finite();
    }
    field.dx = dx;
    field.dy = dy;
    Ok(field)
}

/// Mean displacement magnitude over valid pixels.
pub fn local_distortion(field: &DisplacementField) -> Result<f64, MetricsError> {
    mean_magnitude(field, |_| true)
}

/// As [`local_distortion`], excluding pixels under the black-region mask
/// (`true` = black).
pub fn local_distortion_masked(field: &DisplacementField, mask: &ValidityMask) -> Result<f64, MetricsError> {
    if (mask.height(), mask.width()) != (field.height, field.width) {
        return Err(MetricsError::ExtentMismatch {
            left_h: field.height,
            left_w: field.width,
            right_h: mask.height(),
            right_w: mask.width(),
        });
    }
    let m = mask.data();
    mean_magnitude(field, |i| !m[i])
}

fn mean_magnitude(field: &DisplacementField, keep: impl Fn(usize) -> bool) -> Result<f64, MetricsError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..field.dx.len() {
        if field.valid[i] && keep(i) {
            sum += (field.dx[i] * field.dx[i] + field.dy[i] * field.dy[i]).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::NoValidMatches);
    }
    Ok(sum / n as f64)
}
