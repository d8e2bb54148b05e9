//! Flat document rasters: a white page with text-line bars, ruled lines and
//! figure blocks on a dark textured canvas.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::flow::ValidityMask;
use crate::image::{Channels, ImageRaster};

/// Number of background styles understood by the renderer.
pub const BACKGROUND_STYLES: u32 = 3;

/// Axis-aligned integer rectangle `[x0, x1) × [y0, y1)` on the canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    /// Chebyshev distance from a pixel to the rectangle (0 inside).
    pub fn distance(&self, y: usize, x: usize) -> usize {
        let dx = if x < self.x0 {
            self.x0 - x
        } else if x >= self.x1 {
            x + 1 - self.x1
        } else {
            0
        };
        let dy = if y < self.y0 {
            self.y0 - y
        } else if y >= self.y1 {
            y + 1 - self.y1
        } else {
            0
        };
        dx.max(dy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    /// One word of a text line.
    Word,
    Rule,
    Figure,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutElement {
    pub kind: ElementKind,
    pub rect: PixelRect,
    /// Ink intensity the element was drawn with (before blurring).
    pub intensity: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Page area as a fraction of the canvas, sampled uniformly.
    pub area_fraction: (f64, f64),
    pub blur_sigma: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            area_fraction: (0.5, 0.6),
            blur_sigma: 0.8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RenderedDocument {
    pub image: ImageRaster,
    /// `true` on the page.
    pub mask: ValidityMask,
    pub page: PixelRect,
    pub background_style: u32,
    pub elements: Vec<LayoutElement>,
    pub config: RenderConfig,
}

pub fn render_document(seed: u64, h: usize, w: usize) -> RenderedDocument {
    render_document_with(seed, h, w, &RenderConfig::default())
}

pub fn render_document_with(seed: u64, h: usize, w: usize, cfg: &RenderConfig) -> RenderedDocument {
    assert!(h >= 64 && w >= 64, "canvas must be at least 64x64");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_D0C5);
    let unit = (h.min(w) as f64 / 128.0).max(1.0);

    let page = place_page(&mut rng, h, w, cfg);
    let style = rng.gen_range(0..BACKGROUND_STYLES);
    let mut img = background(&mut rng, h, w, style);

    let paper: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.96..=1.0));
    for y in page.y0..page.y1 {
        for x in page.x0..page.x1 {
            for (c, &p) in paper.iter().enumerate() {
                img.set(y, x, c, p);
            }
        }
    }

    let elements = layout(&mut rng, &page, unit);
    for el in &elements {
        let tint: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-0.03f32..0.03));
        for y in el.rect.y0..el.rect.y1 {
            for x in el.rect.x0..el.rect.x1 {
                for (c, t) in tint.iter().enumerate() {
                    img.set(y, x, c, (el.intensity + t).clamp(0.0, 1.0));
                }
            }
        }
        if el.kind == ElementKind::Figure {
            // darker frame around the block
            let frame = (el.intensity * 0.4).max(0.05);
            for y in el.rect.y0..el.rect.y1 {
                for x in el.rect.x0..el.rect.x1 {
                    let edge = y == el.rect.y0 || y + 1 == el.rect.y1 || x == el.rect.x0 || x + 1 == el.rect.x1;
                    if edge {
                        for c in 0..3 {
                            img.set(y, x, c, frame);
                        }
                    }
                }
            }
        }
    }
    let image = gaussian_blur(&img, cfg.blur_sigma);
    let mask = ValidityMask::new(
        h,
        w,
        (0..h * w).map(|i| page.contains(i / w, i % w)).collect(),
    );
    RenderedDocument {
        image,
        mask,
        page,
        background_style: style,
        elements,
        config: cfg.clone(),
    }
}

fn place_page(rng: &mut ChaCha8Rng, h: usize, w: usize, cfg: &RenderConfig) -> PixelRect {
    let canvas = (h * w) as f64;
    let (lo, hi) = cfg.area_fraction;
    loop {
        let frac = rng.gen_range(lo..=hi);
        let aspect = rng.gen_range(0.85..1.3);
        let ph = ((frac * canvas * aspect).sqrt().round() as usize).min(h * 23 / 25);
        let pw = ((frac * canvas / ph as f64).round() as usize).min(w * 23 / 25);
        let got = (ph * pw) as f64 / canvas;
        if got < lo || got > hi {
            continue;
        }
        // keep the page roughly centred so distortions do not push it off the canvas
        let slack_y = (h - ph) / 2;
        let slack_x = (w - pw) / 2;
        let y0 = slack_y + rng.gen_range(0..=slack_y / 3) - slack_y / 6;
        let x0 = slack_x + rng.gen_range(0..=slack_x / 3) - slack_x / 6;
        return PixelRect {
            x0,
            y0,
            x1: x0 + pw,
            y1: y0 + ph,
        };
    }
}

fn background(rng: &mut ChaCha8Rng, h: usize, w: usize, style: u32) -> ImageRaster {
    let base: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.08..0.35));
    match style {
        0 => ImageRaster::from_fn(h, w, Channels::Rgb, |_, _, c| base[c]),
        1 => {
            // low-frequency value noise on an 8 px lattice
            let (gh, gw) = (h / 8 + 2, w / 8 + 2);
            let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.gen_range(-0.12..0.12)).collect();
            let coarse = ImageRaster::new(gh, gw, Channels::Gray, lattice).expect("lattice extents");
            let fine = coarse.resize(h, w);
            ImageRaster::from_fn(h, w, Channels::Rgb, |y, x, c| (base[c] + fine.get(y, x, 0)).clamp(0.02, 0.6))
        }
        _ => {
            let other: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.45));
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let (ca, sa) = (angle.cos(), angle.sin());
            let norm = (h as f64).hypot(w as f64);
            ImageRaster::from_fn(h, w, Channels::Rgb, |y, x, c| {
                let t = (0.5 + ((x as f64 - w as f64 / 2.0) * ca + (y as f64 - h as f64 / 2.0) * sa) / norm) as f32;
                base[c] * (1.0 - t) + other[c] * t
            })
        }
    }
}

fn layout(rng: &mut ChaCha8Rng, page: &PixelRect, unit: f64) -> Vec<LayoutElement> {
    let px = |lo: f64, hi: f64, rng: &mut ChaCha8Rng| (rng.gen_range(lo..=hi) * unit).round() as usize;
    let margin_x = (page.width() as f64 * rng.gen_range(0.06..0.1)) as usize + 1;
    let margin_y = (page.height() as f64 * rng.gen_range(0.05..0.09)) as usize + 1;
    let (left, right) = (page.x0 + margin_x, page.x1 - margin_x);
    let bottom = page.y1 - margin_y;
    let mut y = page.y0 + margin_y;
    let mut out = Vec::new();
    let mut line_in_par = 0;
    while y < bottom {
        let roll: f64 = rng.gen();
        if roll < 0.06 {
            let hgt = px(2.0, 2.0, rng);
            if y + hgt > bottom {
                break;
            }
            out.push(LayoutElement {
                kind: ElementKind::Rule,
                rect: PixelRect {
                    x0: left,
                    y0: y,
                    x1: right,
                    y1: y + hgt,
                },
                intensity: rng.gen_range(0.1..0.3),
            });
            y += hgt + px(5.0, 9.0, rng);
        } else if roll < 0.12 {
            let hgt = ((page.height() as f64) * rng.gen_range(0.1..0.22)) as usize;
            let wid = (((right - left) as f64) * rng.gen_range(0.4..0.8)) as usize;
            if y + hgt > bottom || hgt < 6 {
                break;
            }
            let x0 = left + rng.gen_range(0..=(right - left - wid));
            out.push(LayoutElement {
                kind: ElementKind::Figure,
                rect: PixelRect {
                    x0,
                    y0: y,
                    x1: x0 + wid,
                    y1: y + hgt,
                },
                intensity: rng.gen_range(0.3..0.6),
            });
            y += hgt + px(6.0, 10.0, rng);
        } else {
            let hgt = px(3.0, 6.0, rng);
            if y + hgt > bottom {
                break;
            }
            let ink = rng.gen_range(0.05..0.3);
            line_in_par += 1;
            let last = line_in_par > 2 && rng.gen_bool(0.25);
            let end = if last {
                left + ((right - left) as f64 * rng.gen_range(0.3..0.8)) as usize
            } else {
                right
            };
            let mut x = left + if line_in_par == 1 { px(0.0, 6.0, rng) } else { 0 };
            loop {
                let ww = px(4.0, 22.0, rng);
                if x + ww > end {
                    break;
                }
                out.push(LayoutElement {
                    kind: ElementKind::Word,
                    rect: PixelRect {
                        x0: x,
                        y0: y,
                        x1: x + ww,
                        y1: y + hgt,
                    },
                    intensity: ink,
                });
                x += ww + px(2.0, 4.0, rng);
            }
            y += hgt + px(5.0, 9.0, rng);
            if last {
                line_in_par = 0;
                y += px(2.0, 6.0, rng);
            }
        }
    }
    out
}

/// Separable Gaussian blur with clamped borders (radius `ceil(3σ)`).
pub fn gaussian_blur(img: &ImageRaster, sigma: f64) -> ImageRaster {
    if sigma <= 0.0 {
        return img.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / norm).collect();
    let (h, w) = (img.height() as isize, img.width() as isize);
    let pass = |src: &ImageRaster, horizontal: bool| {
        ImageRaster::from_fn(h as usize, w as usize, src.channels(), |y, x, ch| {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let d = k as isize - r;
                let (yy, xx) = if horizontal {
                    (y as isize, (x as isize + d).clamp(0, w - 1))
                } else {
                    ((y as isize + d).clamp(0, h - 1), x as isize)
                };
                acc += t * src.get(yy as usize, xx as usize, ch) as f64;
            }
            acc as f32
        })
    };
    pass(&pass(img, true), false)
}
