//! Smooth analytic distortions: a homography plus per-axis sinusoids,
//! evaluated as a backward map from the flat canvas into the distorted one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::PixelRect;
use super::SynthError;
use crate::flow::{ValidityMask, WarpFlow};
use crate::image::ImageRaster;

pub const MAX_SINUSOIDS: usize = 6;
/// Bound on `Σ|a_k|` relative to the short canvas side.
pub const MAX_AMPLITUDE_FRACTION: f64 = 0.08;
pub const NEWTON_TOLERANCE: f64 = 1e-3;
pub const NEWTON_MAX_ITERS: usize = 50;
/// Largest fraction of distorted pixels allowed to miss the tolerance.
pub const MAX_NONCONVERGED_FRACTION: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    U,
    V,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub axis: Axis,
    /// Amplitude in pixels.
    pub amplitude: f64,
    /// Spatial frequency `(f_x, f_y)` in cycles per pixel.
    pub frequency: [f64; 2],
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionParams {
    /// Row-major 3×3 homography, flat canvas → distorted canvas.
    pub homography: [f64; 9],
    /// Largest corner displacement used to build `homography`, in pixels.
    pub perspective: f64,
    pub sinusoids: Vec<Sinusoid>,
    pub page: PixelRect,
    pub background_style: u32,
    pub seed: u64,
}

pub const IDENTITY_HOMOGRAPHY: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

impl DistortionParams {
    pub fn identity(page: PixelRect) -> Self {
        Self {
            homography: IDENTITY_HOMOGRAPHY,
            perspective: 0.0,
            sinusoids: Vec::new(),
            page,
            background_style: 0,
            seed: 0,
        }
    }

    /// Random parameters for an `h × w` canvas.
    pub fn sample(seed: u64, h: usize, w: usize, page: PixelRect, background_style: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD157_0A7E);
        let short = h.min(w) as f64;
        let perspective = rng.gen_range(0.0..0.05) * short;
        let (wf, hf) = (w as f64, h as f64);
        let corners = [(-0.5, -0.5), (wf - 0.5, -0.5), (wf - 0.5, hf - 0.5), (-0.5, hf - 0.5)];
        let moved: Vec<(f64, f64)> = corners
            .iter()
            .map(|&(x, y)| {
                (
                    x + rng.gen_range(-perspective..=perspective),
                    y + rng.gen_range(-perspective..=perspective),
                )
            })
            .collect();
        let homography = homography_from_points(&corners, &moved).unwrap_or(IDENTITY_HOMOGRAPHY);

        let k = rng.gen_range(1..=4usize);
        let budget = rng.gen_range(0.02..0.06) * short;
        let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.3..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let sinusoids = weights
            .iter()
            .map(|wt| {
                let cycles = rng.gen_range(0.4..1.4);
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                Sinusoid {
                    axis: if rng.gen_bool(0.5) { Axis::U } else { Axis::V },
                    amplitude: budget * wt / total * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                    frequency: [cycles * theta.cos() / wf, cycles * theta.sin() / hf],
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                }
            })
            .collect();
        Self {
            homography,
            perspective,
            sinusoids,
            page,
            background_style,
            seed,
        }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<(), SynthError> {
        if self.sinusoids.len() > MAX_SINUSOIDS {
            return Err(SynthError::InvalidParams(format!(
                "{} sinusoids, at most {MAX_SINUSOIDS} allowed",
                self.sinusoids.len()
            )));
        }
        let amp: f64 = self.sinusoids.iter().map(|s| s.amplitude.abs()).sum();
        let bound = MAX_AMPLITUDE_FRACTION * h.min(w) as f64;
        if amp > bound {
            return Err(SynthError::InvalidParams(format!(
                "total sinusoid amplitude {amp:.3} px exceeds {bound:.3} px"
            )));
        }
        if self.homography.iter().any(|v| !v.is_finite()) || self.homography[8] == 0.0 {
            return Err(SynthError::InvalidParams("degenerate homography".into()));
        }
        if self.page.x1 > w || self.page.y1 > h || self.page.area() == 0 {
            return Err(SynthError::InvalidParams(format!("page {:?} outside {h}x{w} canvas", self.page)));
        }
        Ok(())
    }

    /// `F(x, y)` and its Jacobian `[[∂u/∂x, ∂u/∂y], [∂v/∂x, ∂v/∂y]]`.
    pub fn eval(&self, x: f64, y: f64) -> ((f64, f64), [[f64; 2]; 2]) {
        let m = &self.homography;
        let nu = m[0] * x + m[1] * y + m[2];
        let nv = m[3] * x + m[4] * y + m[5];
        let d = m[6] * x + m[7] * y + m[8];
        let (mut u, mut v) = (nu / d, nv / d);
        let d2 = d * d;
        let mut j = [
            [(m[0] * d - nu * m[6]) / d2, (m[1] * d - nu * m[7]) / d2],
            [(m[3] * d - nv * m[6]) / d2, (m[4] * d - nv * m[7]) / d2],
        ];
        for s in &self.sinusoids {
            let tau = std::f64::consts::TAU;
            let arg = tau * (s.frequency[0] * x + s.frequency[1] * y) + s.phase;
            let val = s.amplitude * arg.sin();
            let der = s.amplitude * arg.cos() * tau;
            let row = match s.axis {
                Axis::U => {
                    u += val;
                    0
                }
                Axis::V => {
                    v += val;
                    1
                }
            };
            j[row][0] += der * s.frequency[0];
            j[row][1] += der * s.frequency[1];
        }
        ((u, v), j)
    }

    /// Inverse of the homography part alone (Newton starting point).
    fn homography_inverse(&self, u: f64, v: f64) -> (f64, f64) {
        let inv = invert3(&self.homography).unwrap_or(IDENTITY_HOMOGRAPHY);
        let d = inv[6] * u + inv[7] * v + inv[8];
        ((inv[0] * u + inv[1] * v + inv[2]) / d, (inv[3] * u + inv[4] * v + inv[5]) / d)
    }

    /// Solves `F(p) = q` by Newton iteration; `None` if it fails to converge.
    pub fn invert(&self, qx: f64, qy: f64) -> Option<(f64, f64)> {
        let (mut x, mut y) = self.homography_inverse(qx, qy);
        for _ in 0..NEWTON_MAX_ITERS {
            let ((u, v), j) = self.eval(x, y);
            let (ru, rv) = (u - qx, v - qy);
            if ru.abs().max(rv.abs()) < NEWTON_TOLERANCE {
                return Some((x, y));
            }
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            if det.abs() < 1e-12 || !det.is_finite() {
                return None;
            }
            x -= (j[1][1] * ru - j[0][1] * rv) / det;
            y -= (-j[1][0] * ru + j[0][0] * rv) / det;
        }
        let ((u, v), _) = self.eval(x, y);
        ((u - qx).abs().max((v - qy).abs()) < NEWTON_TOLERANCE).then_some((x, y))
    }
}

#[derive(Clone, Debug)]
pub struct Distorted {
    pub image: ImageRaster,
    /// `F` sampled on the flat canvas grid.
    pub full_flow: WarpFlow,
    /// Page mask transported into the distorted canvas.
    pub mask: ValidityMask,
}

/// Renders the distorted canvas by inverting `F` at every pixel and sampling
/// the flat raster (clamped borders).
pub fn generate_distortion(flat: &ImageRaster, params: &DistortionParams) -> Result<Distorted, SynthError> {
    let (h, w) = (flat.height(), flat.width());
    params.validate(h, w)?;
    let full_flow = WarpFlow::from_fn(h, w, |y, x| params.eval(x as f64, y as f64).0)?;
    let mut image = flat.clone();
    let mut mask = Vec::with_capacity(h * w);
    let mut failed = 0usize;
    let c = flat.channel_count();
    let page = &params.page;
    let (px0, px1) = (page.x0 as f64 - 0.5, page.x1 as f64 - 0.5);
    let (py0, py1) = (page.y0 as f64 - 0.5, page.y1 as f64 - 0.5);
    for qy in 0..h {
        for qx in 0..w {
            let p = params.invert(qx as f64, qy as f64);
            let (x, y) = p.unwrap_or_else(|| {
                failed += 1;
                params.homography_inverse(qx as f64, qy as f64)
            });
            let s = sample_clamped(flat, x, y);
            for (ch, val) in s.iter().take(c).enumerate() {
                image.set(qy, qx, ch, *val);
            }
            mask.push(x >= px0 && x < px1 && y >= py0 && y < py1);
        }
    }
    if failed as f64 > MAX_NONCONVERGED_FRACTION * (h * w) as f64 {
        return Err(SynthError::NonConvergent { failed, total: h * w });
    }
    Ok(Distorted {
        image,
        full_flow,
        mask: ValidityMask::new(h, w, mask),
    })
}

/// Catmull-Rom sample with clamped borders; the distorted canvas is
/// rendered with a cubic kernel so the later bilinear warp is the only
/// low-order resampling in the round trip.
fn sample_clamped(img: &ImageRaster, x: f64, y: f64) -> [f32; 3] {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor(), y.floor());
    let wx = catmull_rom(x - x0);
    let wy = catmull_rom(y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let mut out = [0.0f32; 3];
    for (ch, o) in out.iter_mut().enumerate().take(img.channel_count()) {
        let mut acc = 0.0;
        for (j, wyj) in wy.iter().enumerate() {
            let yy = (y0 + j as isize - 1).clamp(0, h - 1) as usize;
            for (i, wxi) in wx.iter().enumerate() {
                let xx = (x0 + i as isize - 1).clamp(0, w - 1) as usize;
                acc += wyj * wxi * img.get(yy, xx, ch) as f64;
            }
        }
        *o = acc.clamp(0.0, 1.0) as f32;
    }
    out
}

fn catmull_rom(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Homography mapping four source points onto four destination points.
pub fn homography_from_points(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Option<[f64; 9]> {
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let (x, y) = src[i];
        let (u, v) = dst[i];
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    // Gaussian elimination with partial pivoting on the augmented 8×9 system
    for col in 0..8 {
        let piv = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        for row in 0..8 {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..9 {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let mut h = [0.0; 9];
    for i in 0..8 {
        h[i] = a[i][8] / a[i][i];
    }
    h[8] = 1.0;
    Some(h)
}

fn invert3(m: &[f64; 9]) -> Option<[f64; 9]> {
    let c00 = m[4] * m[8] - m[5] * m[7];
    let c01 = m[5] * m[6] - m[3] * m[8];
    let c02 = m[3] * m[7] - m[4] * m[6];
    let det = m[0] * c00 + m[1] * c01 + m[2] * c02;
    if det.abs() < 1e-15 {
        return None;
    }
    let inv = [
        c00,
        m[2] * m[7] - m[1] * m[8],
        m[1] * m[5] - m[2] * m[4],
        c01,
        m[0] * m[8] - m[2] * m[6],
        m[2] * m[3] - m[0] * m[5],
        c02,
        m[1] * m[6] - m[0] * m[7],
        m[0] * m[4] - m[1] * m[3],
    ];
    Some(inv.map(|v| v / det))
}
