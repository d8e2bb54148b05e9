//! Raw numeric kernels shared by the forward and backward passes.

use super::tensor::Real;

/// Geometry of a 2-D convolution over an HWC map with an HWIO kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1×1, stride 1, no padding: the input already is the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub fn im2col<T: Real>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let plen = g.patch_len();
    let mut cols = vec![T::zero(); g.positions() * plen];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * plen..][..plen];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let src = ((iy as usize) * g.in_w + ix as usize) * g.cin;
                    let dst = (ky * g.kw + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&input[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

pub fn col2im_accumulate<T: Real>(cols: &[T], g: &ConvGeometry, out: &mut [T]) {
    let plen = g.patch_len();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &cols[(oy * g.out_w + ox) * plen..][..plen];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let dst = ((iy as usize) * g.in_w + ix as usize) * g.cin;
                    let src = (ky * g.kw + kx) * g.cin;
                    for c in 0..g.cin {
                        out[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
}

/// Border behaviour of bilinear resampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeMode {
    /// Sample positions outside the source grid are clamped to the border.
    Clamp,
    /// The two border samples are linearly extrapolated; affine fields are
    /// reproduced exactly.
    Extrapolate,
}

/// One output index of a separable linear resampling: `w0*src[i0] + w1*src[i1]`.
#[derive(Clone, Copy, Debug)]
pub struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

/// Half-pixel (pixel-center) aligned taps mapping `n_out` samples onto `n_in`.
pub fn resize_taps(n_in: usize, n_out: usize, edge: EdgeMode) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            if n_in == 1 {
                return Tap {
                    i0: 0,
                    i1: 0,
                    w0: 1.0,
                    w1: 0.0,
                };
            }
            let t = (o as f64 + 0.5) * scale - 0.5;
            match edge {
                EdgeMode::Clamp => {
                    let t = t.clamp(0.0, (n_in - 1) as f64);
                    let i0 = (t.floor() as usize).min(n_in - 2);
                    let f = t - i0 as f64;
                    Tap {
                        i0,
                        i1: i0 + 1,
                        w0: 1.0 - f,
                        w1: f,
                    }
                }
                EdgeMode::Extrapolate => {
                    let i0 = (t.floor().max(0.0) as usize).min(n_in - 2);
                    let f = t - i0 as f64;
                    Tap {
                        i0,
                        i1: i0 + 1,
                        w0: 1.0 - f,
                        w1: f,
                    }
                }
            }
        })
        .collect()
}

/// Separable bilinear resize of an `[h, w, c]` map.
pub fn resize_hwc<T: Real>(
    src: &[T],
    h: usize,
    w: usize,
    c: usize,
    out_h: usize,
    out_w: usize,
    edge: EdgeMode,
) -> Vec<T> {
    let ty = resize_taps(h, out_h, edge);
    let tx = resize_taps(w, out_w, edge);
    let mut out = vec![T::zero(); out_h * out_w * c];
    for (oy, a) in ty.iter().enumerate() {
        let ay0 = T::from_f64_lossy(a.w0);
        let ay1 = T::from_f64_lossy(a.w1);
        for (ox, b) in tx.iter().enumerate() {
            let bx0 = T::from_f64_lossy(b.w0);
            let bx1 = T::from_f64_lossy(b.w1);
            let dst = &mut out[(oy * out_w + ox) * c..][..c];
            let p00 = &src[(a.i0 * w + b.i0) * c..][..c];
            let p01 = &src[(a.i0 * w + b.i1) * c..][..c];
            let p10 = &src[(a.i1 * w + b.i0) * c..][..c];
            let p11 = &src[(a.i1 * w + b.i1) * c..][..c];
            for ch in 0..c {
                dst[ch] = ay0 * (bx0 * p00[ch] + bx1 * p01[ch]) + ay1 * (bx0 * p10[ch] + bx1 * p11[ch]);
            }
        }
    }
    out
}

/// Adjoint of [`resize_hwc`]: scatters output gradients back onto the source grid.
pub fn resize_hwc_adjoint<T: Real>(
    grad_out: &[T],
    h: usize,
    w: usize,
    c: usize,
    out_h: usize,
    out_w: usize,
    edge: EdgeMode,
) -> Vec<T> {
    let ty = resize_taps(h, out_h, edge);
    let tx = resize_taps(w, out_w, edge);
    let mut g = vec![T::zero(); h * w * c];
    for (oy, a) in ty.iter().enumerate() {
        let ay0 = T::from_f64_lossy(a.w0);
        let ay1 = T::from_f64_lossy(a.w1);
        for (ox, b) in tx.iter().enumerate() {
            let bx0 = T::from_f64_lossy(b.w0);
            let bx1 = T::from_f64_lossy(b.w1);
            let go = &grad_out[(oy * out_w + ox) * c..][..c];
            for (corner, wgt) in [
                ((a.i0 * w + b.i0) * c, ay0 * bx0),
                ((a.i0 * w + b.i1) * c, ay0 * bx1),
                ((a.i1 * w + b.i0) * c, ay1 * bx0),
                ((a.i1 * w + b.i1) * c, ay1 * bx1),
            ] {
                for ch in 0..c {
                    g[corner + ch] += wgt * go[ch];
                }
            }
        }
    }
    g
}

/// Index of neighbour `k` (row-major over the 3×3 window) of coarse cell
/// `(i, j)`, replicate-padded at the borders.
#[inline]
pub fn neighbour(i: usize, j: usize, k: usize, h: usize, w: usize) -> usize {
    let dy = (k / 3) as isize - 1;
    let dx = (k % 3) as isize - 1;
    let ni = (i as isize + dy).clamp(0, h as isize - 1) as usize;
    let nj = (j as isize + dx).clamp(0, w as isize - 1) as usize;
    ni * w + nj
}
