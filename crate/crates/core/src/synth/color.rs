use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::{Channels, ImageRaster};

/// RGB in `[0, 1]` to `(hue, saturation, value)`, hue in turns `[0, 1)`.
pub fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let sat = if max <= 0.0 { 0.0 } else { delta / max };
    [hue, sat, max]
}

pub fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Shifts every pixel by one random HSV offset drawn uniformly from
/// `[-max, max]` per component. Hue wraps; saturation and value clamp.
pub fn hsv_jitter(img: &ImageRaster, max_dh: f64, max_ds: f64, max_dv: f64, seed: u64) -> ImageRaster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
    let (dh, ds, dv) = (draw(max_dh), draw(max_ds), draw(max_dv));
    shift_hsv(img, dh, ds, dv)
}

/// Applies a fixed HSV offset to every pixel of an RGB raster.
pub fn shift_hsv(img: &ImageRaster, dh: f64, ds: f64, dv: f64) -> ImageRaster {
    let rgb = img.to_rgb();
    let mut out = rgb.clone();
    for (dst, src) in out.data_mut().chunks_mut(3).zip(rgb.data().chunks(3)) {
        let [h, s, v] = rgb_to_hsv([src[0] as f64, src[1] as f64, src[2] as f64]);
        let shifted = [
            (h + dh).rem_euclid(1.0),
            (s + ds).clamp(0.0, 1.0),
            (v + dv).clamp(0.0, 1.0),
        ];
        let back = hsv_to_rgb(shifted);
        for c in 0..3 {
            dst[c] = back[c] as f32;
        }
    }
    match img.channels() {
        Channels::Rgb => out,
        Channels::Gray => out.to_gray(),
    }
}
