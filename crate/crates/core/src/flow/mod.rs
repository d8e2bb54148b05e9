//! Backward warping flows.
//!
//! A [`WarpFlow`] stores, for every pixel of the output (rectified) raster,
//! the absolute source coordinate in the input raster. Coordinates are
//! pixel-center aligned: the center of input pixel `(x, y)` is the point
//! `(x, y)`, so the identity flow holds `u(x, y) = x`, `v(x, y) = y`.

mod wfl;

pub use wfl::{read_wfl, write_wfl, WFL_FLAG_SENTINEL, WFL_MAGIC};

use thiserror::Error;

use crate::autodiff::kernels::{resize_hwc, EdgeMode};
use crate::image::{Channels, ImageRaster};

/// Smallest admissible crop side, in pixels.
pub const MIN_CROP_SIDE: usize = 32;

/// Value written into ground-truth flows where the source falls outside the
/// input (the discontinuous-flow variant).
pub const FLOW_SENTINEL: f32 = -1.0;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("flow extents {lhs:?} and {rhs:?} differ")]
    ExtentMismatch { lhs: (usize, usize), rhs: (usize, usize) },
    #[error("invalid flow: {0}")]
    Invalid(String),
    #[error("crop {crop:?} is not a valid rectangle inside a {height}x{width} image")]
    InvalidCrop { crop: CropRect, height: usize, width: usize },
    #[error("crop {0:?} contains no document content")]
    EmptyPreimage(CropRect),
    #[error("{path}: {reason}")]
    File { path: String, reason: String },
}

/// Dense backward map over a `height × width` output grid.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpFlow {
    height: usize,
    width: usize,
    u: Vec<f32>,
    v: Vec<f32>,
}

impl WarpFlow {
    pub fn new(height: usize, width: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self, FlowError> {
        if height == 0 || width == 0 || u.len() != height * width || v.len() != height * width {
            return Err(FlowError::Invalid(format!(
                "{height}x{width} grid with {} u and {} v entries",
                u.len(),
                v.len()
            )));
        }
        if u.iter().chain(&v).any(|c| !c.is_finite()) {
            return Err(FlowError::Invalid("non-finite coordinate".into()));
        }
        Ok(Self { height, width, u, v })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Result<Self, FlowError> {
        let mut u = Vec::with_capacity(height * width);
        let mut v = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(y, x);
                u.push(a as f32);
                v.push(b as f32);
            }
        }
        Self::new(height, width, u, v)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn u_map(&self) -> &[f32] {
        &self.u
    }

    pub fn v_map(&self) -> &[f32] {
        &self.v
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    /// Interleaved `[H, W, 2]` layout, `(u, v)` per pixel.
    pub fn to_interleaved(&self) -> Vec<f32> {
        self.u.iter().zip(&self.v).flat_map(|(&a, &b)| [a, b]).collect()
    }

    pub fn from_interleaved(height: usize, width: usize, uv: &[f32]) -> Result<Self, FlowError> {
        if uv.len() != height * width * 2 {
            return Err(FlowError::Invalid(format!("{} interleaved entries for {height}x{width}", uv.len())));
        }
        let u = uv.iter().step_by(2).copied().collect();
        let v = uv.iter().skip(1).step_by(2).copied().collect();
        Self::new(height, width, u, v)
    }

    /// Flow restricted to the sub-grid `[y0, y0 + h) × [x0, x0 + w)`.
    pub fn restrict(&self, x0: usize, y0: usize, w: usize, h: usize) -> WarpFlow {
        assert!(x0 + w <= self.width && y0 + h <= self.height);
        let mut u = Vec::with_capacity(w * h);
        let mut v = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            let row = y * self.width;
            u.extend_from_slice(&self.u[row + x0..row + x0 + w]);
            v.extend_from_slice(&self.v[row + x0..row + x0 + w]);
        }
        WarpFlow {
            height: h,
            width: w,
            u,
            v,
        }
    }

    /// Applies `(u, v) ↦ f(u, v)` to every coordinate pair.
    pub fn map_coords(&self, f: impl Fn(f32, f32) -> (f32, f32)) -> WarpFlow {
        let (u, v) = self.u.iter().zip(&self.v).map(|(&a, &b)| f(a, b)).unzip();
        WarpFlow {
            height: self.height,
            width: self.width,
            u,
            v,
        }
    }

    /// Bilinear resample of both coordinate planes onto an `out_h × out_w`
    /// grid. Border samples are linearly extrapolated so that affine
    /// coordinate fields survive exactly. Values are not rescaled.
    pub fn resample(&self, out_h: usize, out_w: usize) -> WarpFlow {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        // interpolate in 64-bit so integer-valued affine fields land exactly
        let inter: Vec<f64> = self.to_interleaved().into_iter().map(f64::from).collect();
        let out = resize_hwc(&inter, self.height, self.width, 2, out_h, out_w, EdgeMode::Extrapolate);
        let out: Vec<f32> = out.into_iter().map(|v| v as f32).collect();
        WarpFlow::from_interleaved(out_h, out_w, &out).expect("resampling preserves finiteness")
    }
}

/// Rectangle in pixel units of the full distorted image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl CropRect {
    pub fn validate(&self, image_height: usize, image_width: usize) -> Result<(), FlowError> {
        let ok = self.width >= MIN_CROP_SIDE
            && self.height >= MIN_CROP_SIDE
            && self.x + self.width <= image_width
            && self.y + self.height <= image_height;
        if ok {
            Ok(())
        } else {
            Err(FlowError::InvalidCrop {
                crop: *self,
                height: image_height,
                width: image_width,
            })
        }
    }

    /// Whether a source coordinate lies inside the span of pixel centers.
    pub fn contains_point(&self, u: f32, v: f32) -> bool {
        u >= self.x as f32
            && u <= (self.x + self.width - 1) as f32
            && v >= self.y as f32
            && v <= (self.y + self.height - 1) as f32
    }
}

/// Boolean raster over the output grid; `true` where the flow's bilinear
/// support is at least half inside the input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidityMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl ValidityMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), height * width);
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count_valid(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn all_valid(&self) -> bool {
        self.data.iter().all(|&b| b)
    }

    pub fn complement(&self) -> ValidityMask {
        ValidityMask::new(self.height, self.width, self.data.iter().map(|b| !b).collect())
    }

    /// Nearest-neighbour resize (pixel-center aligned).
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> ValidityMask {
        let mut data = Vec::with_capacity(out_h * out_w);
        for y in 0..out_h {
            let sy = (((y as f64 + 0.5) * self.height as f64 / out_h as f64) as usize).min(self.height - 1);
            for x in 0..out_w {
                let sx = (((x as f64 + 0.5) * self.width as f64 / out_w as f64) as usize).min(self.width - 1);
                data.push(self.data[sy * self.width + sx]);
            }
        }
        ValidityMask::new(out_h, out_w, data)
    }

    pub fn to_raster(&self) -> ImageRaster {
        ImageRaster::new(
            self.height,
            self.width,
            Channels::Gray,
            self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask extents")
    }

    pub fn from_raster(img: &ImageRaster) -> ValidityMask {
        let c = img.channel_count();
        let data = img.data().chunks(c).map(|p| p[0] >= 0.5).collect();
        ValidityMask::new(img.height(), img.width(), data)
    }
}

pub fn identity_flow(height: usize, width: usize) -> WarpFlow {
    WarpFlow::from_fn(height, width, |y, x| (x as f64, y as f64)).expect("identity flow is finite")
}

/// Bilinear corners of a source coordinate with their weights and whether
/// each corner lies inside a `height × width` raster.
#[inline]
fn bilinear_corners(u: f64, v: f64, height: usize, width: usize) -> [(isize, isize, f64, bool); 4] {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let inside = |x: isize, y: isize| x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height;
    [
        (x0, y0, (1.0 - fx) * (1.0 - fy), inside(x0, y0)),
        (x0 + 1, y0, fx * (1.0 - fy), inside(x0 + 1, y0)),
        (x0, y0 + 1, (1.0 - fx) * fy, inside(x0, y0 + 1)),
        (x0 + 1, y0 + 1, fx * fy, inside(x0 + 1, y0 + 1)),
    ]
}

/// Fraction of bilinear support inside the raster at which a sample counts as valid.
pub const VALID_SUPPORT: f64 = 0.5;

/// Backward warp: `out(x, y) = input(u(x, y), v(x, y))`, bilinear. Corners
/// outside the input contribute `fill`.
pub fn warp(input: &ImageRaster, flow: &WarpFlow, fill: f32) -> (ImageRaster, ValidityMask) {
    let (ih, iw, c) = (input.height(), input.width(), input.channel_count());
    let mut out = ImageRaster::filled(flow.height, flow.width, input.channels(), fill);
    let mut valid = Vec::with_capacity(flow.height * flow.width);
    let fill64 = fill as f64;
    let mut acc = vec![0.0f64; c];
    for y in 0..flow.height {
        for x in 0..flow.width {
            let (u, v) = flow.at(y, x);
            let corners = bilinear_corners(u as f64, v as f64, ih, iw);
            let mut support = 0.0;
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &(cx, cy, w, inside) in &corners {
                if inside {
                    support += w;
                    let px = input.pixel(cy as usize, cx as usize);
                    for ch in 0..c {
                        acc[ch] += w * px[ch] as f64;
                    }
                } else {
                    for a in acc.iter_mut() {
                        *a += w * fill64;
                    }
                }
            }
            for (ch, a) in acc.iter().enumerate() {
                out.set(y, x, ch, *a as f32);
            }
            valid.push(support >= VALID_SUPPORT);
        }
    }
    (out, ValidityMask::new(flow.height, flow.width, valid))
}

/// Validity mask of a flow against a `height × width` input without sampling.
pub fn validity(flow: &WarpFlow, height: usize, width: usize) -> ValidityMask {
    let data = flow
        .u
        .iter()
        .zip(&flow.v)
        .map(|(&u, &v)| {
            bilinear_corners(u as f64, v as f64, height, width)
                .iter()
                .filter(|c| c.3)
                .map(|c| c.2)
                .sum::<f64>()
                >= VALID_SUPPORT
        })
        .collect();
    ValidityMask::new(flow.height, flow.width, data)
}

/// Rescales a flow predicted on a `flow.height × flow.width` network grid to
/// an `out_h × out_w` grid whose coordinates address a `src_h × src_w`
/// input. Coordinates follow the pixel-center convention:
/// `u' = (u + 0.5) · src_w / W_net − 0.5`.
pub fn resize_flow(flow: &WarpFlow, out_h: usize, out_w: usize, src_h: usize, src_w: usize) -> WarpFlow {
    if out_h == flow.height && out_w == flow.width && src_h == flow.height && src_w == flow.width {
        return flow.clone();
    }
    let sx = src_w as f64 / flow.width as f64;
    let sy = src_h as f64 / flow.height as f64;
    let inter: Vec<f64> = flow.to_interleaved().into_iter().map(f64::from).collect();
    let out = if (out_h, out_w) == (flow.height, flow.width) {
        inter
    } else {
        resize_hwc(&inter, flow.height, flow.width, 2, out_h, out_w, EdgeMode::Extrapolate)
    };
    let scaled: Vec<f32> = out
        .chunks(2)
        .flat_map(|p| [((p[0] + 0.5) * sx - 0.5) as f32, ((p[1] + 0.5) * sy - 0.5) as f32])
        .collect();
    WarpFlow::from_interleaved(out_h, out_w, &scaled).expect("resampling preserves finiteness")
}

/// Ground-truth flow for a crop of a distorted image.
///
/// `full_flow` maps the rectified document grid into the full distorted
/// image. The rectified target of the crop is the bounding box of every
/// rectified pixel whose source lies in the crop; the flow is restricted to
/// that box, shifted into crop coordinates and resampled to
/// `out_h × out_w`. Box pixels whose source lies outside the crop keep
/// their (out-of-crop) coordinates and become fill at warp time.
pub fn compose_crop_flow(full_flow: &WarpFlow, crop: &CropRect, out_h: usize, out_w: usize) -> Result<WarpFlow, FlowError> {
    let b = crop_preimage_box(full_flow, crop)?;
    let (ox, oy) = (crop.x as f32, crop.y as f32);
    Ok(full_flow
        .restrict(b.x, b.y, b.width, b.height)
        .map_coords(|u, v| (u - ox, v - oy))
        .resample(out_h, out_w))
}

/// Bounding box, in rectified pixels, of the pixels whose source lies in `crop`.
pub fn crop_preimage_box(full_flow: &WarpFlow, crop: &CropRect) -> Result<CropRect, FlowError> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for y in 0..full_flow.height {
        for x in 0..full_flow.width {
            let (u, v) = full_flow.at(y, x);
            if crop.contains_point(u, v) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if x0 == usize::MAX {
        return Err(FlowError::EmptyPreimage(*crop));
    }
    Ok(CropRect {
        x: x0,
        y: y0,
        width: x1 - x0 + 1,
        height: y1 - y0 + 1,
    })
}

/// Mean absolute difference over all `2·H·W` coordinate entries.
pub fn flow_l1(pred: &WarpFlow, gt: &WarpFlow) -> Result<f64, FlowError> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(FlowError::ExtentMismatch {
            lhs: (pred.height, pred.width),
            rhs: (gt.height, gt.width),
        });
    }
    let total: f64 = pred
        .u
        .iter()
        .zip(&gt.u)
        .chain(pred.v.iter().zip(&gt.v))
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(total / (2 * pred.height * pred.width) as f64)
}

/// Overwrites both coordinates with [`FLOW_SENTINEL`] wherever the flow
/// leaves a `src_h × src_w` input.
pub fn apply_sentinel(flow: &WarpFlow, src_h: usize, src_w: usize) -> WarpFlow {
    let mask = validity(flow, src_h, src_w);
    let mut out = flow.clone();
    for (i, &ok) in mask.data().iter().enumerate() {
        if !ok {
            out.u[i] = FLOW_SENTINEL;
            out.v[i] = FLOW_SENTINEL;
        }
    }
    out
}

/// Debug visualisation of the displacement `flow − identity`: hue encodes
/// direction, saturation the magnitude relative to `max_disp`.
pub fn debug_colormap(flow: &WarpFlow, max_disp: f32) -> ImageRaster {
    ImageRaster::from_fn(flow.height, flow.width, Channels::Rgb, |y, x, ch| {
        let (u, v) = flow.at(y, x);
        let (dx, dy) = (u - x as f32, v - y as f32);
        let mag = ((dx * dx + dy * dy).sqrt() / max_disp.max(1e-6)).min(1.0);
        let hue = (dy.atan2(dx) / std::f32::consts::TAU).rem_euclid(1.0);
        let rgb = crate::synth::hsv_to_rgb([hue as f64, mag as f64, 1.0]);
        rgb[ch] as f32
    })
}
