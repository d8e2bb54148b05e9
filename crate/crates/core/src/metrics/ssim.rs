use std::collections::VecDeque;

use super::gray::GrayImage;
use super::MetricsError;
use crate::flow::ValidityMask;
use crate::image::ImageRaster;

/// Pixel area images are resized to before MS-SSIM and matching.
pub const PROTOCOL_AREA: f64 = 598_400.0;

/// Per-level exponents as published; they sum to 1.0001 and are
/// renormalized by [`msssim_weights`].
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const MSSSIM_LEVELS: usize = 5;
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
/// Short side needed so that the coarsest level still fits one window.
pub const MSSSIM_MIN_SIDE: usize = WINDOW << (MSSSIM_LEVELS - 1);

/// Intensity at or below which a pixel counts as fill (all channels).
pub const FILL_THRESHOLD: f32 = 1.0 / 255.0;

/// Uniform rescale to about [`PROTOCOL_AREA`] pixels, aspect preserved.
pub fn protocol_resize(img: &ImageRaster) -> ImageRaster {
    let (h, w) = (img.height(), img.width());
    let s = (PROTOCOL_AREA / (h * w) as f64).sqrt();
    let oh = ((s * h as f64).round() as usize).max(1);
    let ow = ((s * w as f64).round() as usize).max(1);
    img.resize(oh, ow)
}

pub fn msssim_weights() -> [f64; 5] {
    let total: f64 = MSSSIM_WEIGHTS.iter().sum();
    MSSSIM_WEIGHTS.map(|w| w / total)
}

/// Window means of one SSIM evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimStats {
    pub ssim: f64,
    pub luminance: f64,
    pub contrast_structure: f64,
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter keeping only fully supported positions.
fn filter_valid(data: &[f64], h: usize, w: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - WINDOW, w + 1 - WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &data[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (t, kt) in k.iter().enumerate() {
            let r = &rows[(y + t) * ow..(y + t + 1) * ow];
            for (o, v) in out[y * ow..(y + 1) * ow].iter_mut().zip(r) {
                *o += kt * v;
            }
        }
    }
    out
}

/// Single-scale SSIM (11×11 Gaussian, σ 1.5, dynamic range 1).
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<SsimStats, MetricsError> {
    a.same_extents(b)?;
    let (h, w) = (a.height(), a.width());
    if h < WINDOW || w < WINDOW {
        return Err(MetricsError::TooSmall {
            height: h,
            width: w,
            levels: 1,
            min: WINDOW,
        });
    }
    let k = gaussian_window();
    let (x, y) = (a.data(), b.data());
    let sq = |v: &[f64]| v.iter().map(|t| t * t).collect::<Vec<_>>();
    let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    let mx = filter_valid(x, h, w, &k);
    let my = filter_valid(y, h, w, &k);
    let mxx = filter_valid(&sq(x), h, w, &k);
    let myy = filter_valid(&sq(y), h, w, &k);
    let mxy = filter_valid(&xy, h, w, &k);
    let (c1, c2) = ((K1 * K1), (K2 * K2));
    let (mut s_sum, mut l_sum, mut cs_sum) = (0.0, 0.0, 0.0);
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cov = mxy[i] - ux * uy;
        let l = (2.0 * ux * uy + c1) / (ux * ux + uy * uy + c1);
        let cs = (2.0 * cov + c2) / (vx + vy + c2);
        s_sum += l * cs;
        l_sum += l;
        cs_sum += cs;
    }
    let n = mx.len() as f64;
    Ok(SsimStats {
        ssim: s_sum / n,
        luminance: l_sum / n,
        contrast_structure: cs_sum / n,
    })
}

/// Five-scale SSIM in product form: contrast-structure at every level,
/// luminance at the coarsest, with the renormalized level weights.
/// Negative contrast-structure means are clamped to 0 before the power.
pub fn msssim(a: &GrayImage, b: &GrayImage) -> Result<f64, MetricsError> {
    a.same_extents(b)?;
    if a.height().min(a.width()) < MSSSIM_MIN_SIDE {
        return Err(MetricsError::TooSmall {
            height: a.height(),
            width: a.width(),
            levels: MSSSIM_LEVELS,
            min: MSSSIM_MIN_SIDE,
        });
    }
    let weights = msssim_weights();
    let (mut x, mut y) = (a.clone(), b.clone());
    let mut score = 1.0;
    for (level, &wt) in weights.iter().enumerate() {
        let st = ssim(&x, &y)?;
        score *= st.contrast_structure.max(0.0).powf(wt);
        if level + 1 == MSSSIM_LEVELS {
            score *= st.luminance.max(0.0).powf(wt);
        } else {
            x = x.downsample2();
            y = y.downsample2();
        }
    }
    Ok(score)
}

/// Black regions of a rectified image (`true` = black). With a validity
/// mask this is its complement; otherwise fill-valued pixels connected to
/// the image border.
pub fn black_region_mask(rectified: &ImageRaster, validity: Option<&ValidityMask>) -> Result<ValidityMask, MetricsError> {
    let (h, w) = (rectified.height(), rectified.width());
    if let Some(v) = validity {
        if (v.height(), v.width()) != (h, w) {
            return Err(MetricsError::ExtentMismatch {
                left_h: h,
                left_w: w,
                right_h: v.height(),
                right_w: v.width(),
            });
        }
        return Ok(v.complement());
    }
    let fill: Vec<bool> = (0..h * w)
        .map(|i| rectified.pixel(i / w, i % w).iter().all(|&c| c <= FILL_THRESHOLD))
        .collect();
    let mut black = vec![false; h * w];
    let mut queue = VecDeque::new();
    let seed = |i: usize, black: &mut Vec<bool>, q: &mut VecDeque<usize>| {
        if fill[i] && !black[i] {
            black[i] = true;
            q.push_back(i);
        }
    };
    for x in 0..w {
        seed(x, &mut black, &mut queue);
        seed((h - 1) * w + x, &mut black, &mut queue);
    }
    for y in 0..h {
        seed(y * w, &mut black, &mut queue);
        seed(y * w + w - 1, &mut black, &mut queue);
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = (i / w, i % w);
        if x > 0 {
            seed(i - 1, &mut black, &mut queue);
        }
        if x + 1 < w {
            seed(i + 1, &mut black, &mut queue);
        }
        if y > 0 {
            seed(i - w, &mut black, &mut queue);
        }
        if y + 1 < h {
            seed(i + w, &mut black, &mut queue);
        }
    }
    Ok(ValidityMask::new(h, w, black))
}

/// Zeroes every pixel under `mask` (`true` = masked).
pub fn apply_mask(img: &ImageRaster, mask: &ValidityMask) -> ImageRaster {
    let mut out = img.clone();
    let c = img.channel_count();
    for (px, &m) in out.data_mut().chunks_mut(c).zip(mask.data()) {
        if m {
            px.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}

/// MS-SSIM of a rectified image against its ground truth: the ground truth
/// is resized to the rectified extents, then both go through
/// [`protocol_resize`] and luma conversion.
pub fn msssim_pair(rectified: &ImageRaster, gt: &ImageRaster) -> Result<f64, MetricsError> {
    let gt = gt.resize(rectified.height(), rectified.width());
    let a = GrayImage::from_raster(&protocol_resize(rectified));
    let b = GrayImage::from_raster(&protocol_resize(&gt));
    msssim(&a, &b)
}

/// [`msssim_pair`] after zeroing the black regions in both operands.
pub fn msssim_masked(rectified: &ImageRaster, gt: &ImageRaster, mask: &ValidityMask) -> Result<f64, MetricsError> {
    let (h, w) = (rectified.height(), rectified.width());
    if (mask.height(), mask.width()) != (h, w) {
        return Err(MetricsError::ExtentMismatch {
            left_h: h,
            left_w: w,
            right_h: mask.height(),
            right_w: mask.width(),
        });
    }
    let gt = apply_mask(&gt.resize(h, w), mask);
    msssim_pair(&apply_mask(rectified, mask), &gt)
}
