use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::flow::ValidityMask;
use crate::image::{Channels, ImageRaster};

fn noise(h: usize, w: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GrayImage::from_fn(h, w, |_, _| rng.gen::<f64>())
}

/// Blurred dark bars on white, roughly like lines of words.
pub(crate) fn text_texture(h: usize, w: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = vec![1.0; h * w];
    let mut y = 2;
    while y + 6 < h {
        let line_h = rng.gen_range(4..7);
        let mut x = rng.gen_range(0..6);
        while x + 3 < w {
            let word = rng.gen_range(4..18).min(w - x);
            let ink = rng.gen_range(0.05..0.4);
            for yy in y..(y + line_h).min(h) {
                for xx in x..x + word {
                    img[yy * w + xx] = ink;
                }
            }
            x += word + rng.gen_range(3..7);
        }
        y += line_h + rng.gen_range(3..6);
    }
    let raster = ImageRaster::new(h, w, Channels::Gray, img.iter().map(|&v| v as f32).collect()).unwrap();
    GrayImage::from_raster(&crate::synth::gaussian_blur(&raster, 1.0))
}

fn to_raster(g: &GrayImage) -> ImageRaster {
    ImageRaster::new(g.height(), g.width(), Channels::Gray, g.data().iter().map(|&v| v as f32).collect()).unwrap()
}

#[test]
fn protocol_resize_examples() {
    let r = protocol_resize(&ImageRaster::filled(748, 800, Channels::Gray, 0.5));
    assert_eq!((r.height(), r.width()), (748, 800));
    let r = protocol_resize(&ImageRaster::filled(1496, 1600, Channels::Gray, 0.5));
    assert_eq!((r.height(), r.width()), (748, 800));
    // sqrt(59.84)·100 = 773.56 rounds to 774
    let r = protocol_resize(&ImageRaster::filled(100, 100, Channels::Gray, 0.5));
    assert_eq!((r.height(), r.width()), (774, 774));
    for (h, w) in [(100, 100), (300, 200), (1000, 700), (57, 91)] {
        let r = protocol_resize(&ImageRaster::filled(h, w, Channels::Gray, 0.5));
        let area = (r.height() * r.width()) as f64;
        assert!((area / PROTOCOL_AREA - 1.0).abs() < 0.01, "{h}x{w} → {area}");
    }
}

#[test]
fn weights_renormalize() {
    let w = msssim_weights();
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    assert!((MSSSIM_WEIGHTS.iter().sum::<f64>() - 1.0001).abs() < 1e-12);
    for (a, b) in w.iter().zip(MSSSIM_WEIGHTS) {
        assert!((a * 1.0001 - b).abs() < 1e-12);
    }
    assert_eq!(MSSSIM_MIN_SIDE, 176);
}

#[test]
fn ssim_identity_and_inversion() {
    let x = noise(40, 40, 1);
    assert!((ssim(&x, &x).unwrap().ssim - 1.0).abs() < 1e-9);
    let half = GrayImage::from_fn(40, 40, |_, c| if c < 20 { 0.0 } else { 1.0 });
    let inv = GrayImage::from_fn(40, 40, |y, c| 1.0 - half.get(y, c));
    assert!(ssim(&half, &inv).unwrap().ssim < 0.1);
    assert!(ssim(&x, &noise(41, 40, 1)).is_err());
}

#[test]
fn intensity_shift_hits_luminance_only() {
    let x = GrayImage::from_fn(40, 40, |y, c| 0.3 + 0.4 * noise(40, 40, 2).get(y, c));
    let shifted = GrayImage::from_fn(40, 40, |y, c| x.get(y, c) + 0.1);
    let s = ssim(&x, &shifted).unwrap();
    assert!(s.luminance < 1.0 - 1e-4);
    assert!((s.contrast_structure - 1.0).abs() < 1e-9);
}

#[test]
fn msssim_properties() {
    let x = text_texture(192, 200, 3);
    assert!((msssim(&x, &x).unwrap() - 1.0).abs() < 1e-6);
    let a = noise(180, 180, 4);
    let b = noise(180, 180, 5);
    let s = msssim(&a, &b).unwrap();
    assert!(s < 0.2, "independent noise scored {s}");
    let t = msssim(&b, &a).unwrap();
    assert!((s - t).abs() < 1e-9);
    let y = text_texture(192, 200, 8);
    assert!((msssim(&x, &y).unwrap() - msssim(&y, &x).unwrap()).abs() < 1e-9);
    match msssim(&noise(175, 300, 1), &noise(175, 300, 2)) {
        Err(MetricsError::TooSmall { min, .. }) => assert_eq!(min, 176),
        other => panic!("expected rejection, got {other:?}"),
    }
}

#[test]
fn black_mask_rules() {
    let img = ImageRaster::filled(20, 20, Channels::Rgb, 0.8);
    assert_eq!(black_region_mask(&img, None).unwrap().count_valid(), 0);

    // black corner connected to the border, dark ink inside the page
    let mut img = img;
    for y in 0..5 {
        for x in 0..5 {
            for c in 0..3 {
                img.set(y, x, c, 0.0);
            }
        }
    }
    for c in 0..3 {
        img.set(10, 10, c, 0.0);
    }
    let m = black_region_mask(&img, None).unwrap();
    assert_eq!(m.count_valid(), 25);
    assert!(m.get(0, 0) && m.get(4, 4));
    assert!(!m.get(10, 10));

    let validity = ValidityMask::new(20, 20, (0..400).map(|i| i % 20 > 3).collect());
    assert_eq!(black_region_mask(&img, Some(&validity)).unwrap(), validity.complement());
}

#[test]
fn warp_validity_defines_black_regions() {
    // a shifted crop leaves known out-of-source columns
    let src = to_raster(&text_texture(32, 32, 1));
    let flow = crate::flow::WarpFlow::from_fn(32, 32, |y, x| (x as f64 - 6.0, y as f64)).unwrap();
    let (rect, valid) = crate::flow::warp(&src, &flow, 0.0);
    let m = black_region_mask(&rect, Some(&valid)).unwrap();
    assert_eq!(m, valid.complement());
    assert!(m.get(5, 0) && !m.get(5, 10));
}

#[test]
fn masked_msssim_reductions() {
    let gt = to_raster(&text_texture(200, 180, 6));
    let rect = to_raster(&text_texture(200, 180, 7));
    let empty = ValidityMask::filled(200, 180, false);
    assert_eq!(msssim_masked(&rect, &gt, &empty).unwrap(), msssim_pair(&rect, &gt).unwrap());

    // rectified equals masked gt; growing the mask keeps the score at 1
    let mask = ValidityMask::new(200, 180, (0..200 * 180).map(|i| i % 180 < 30).collect());
    let r = apply_mask(&gt, &mask);
    assert!((msssim_masked(&r, &gt, &mask).unwrap() - 1.0).abs() < 1e-6);
    let bigger = ValidityMask::new(200, 180, (0..200 * 180).map(|i| i % 180 < 50 || i / 180 > 170).collect());
    assert!((msssim_masked(&r, &gt, &bigger).unwrap() - 1.0).abs() < 1e-6);
}

#[test]
fn local_distortion_examples() {
    assert_eq!(local_distortion(&DisplacementField::constant(10, 10, 0.0, 0.0)).unwrap(), 0.0);
    let f = DisplacementField::constant(10, 12, 3.0, 4.0);
    assert_eq!(local_distortion(&f).unwrap(), 5.0);
    let half = ValidityMask::new(10, 12, (0..120).map(|i| i < 60).collect());
    assert_eq!(local_distortion_masked(&f, &half).unwrap(), 5.0);
    let empty = ValidityMask::filled(10, 12, false);
    assert_eq!(local_distortion_masked(&f, &empty).unwrap(), local_distortion(&f).unwrap());
    assert!(matches!(
        local_distortion_masked(&f, &ValidityMask::filled(10, 12, true)),
        Err(MetricsError::NoValidMatches)
    ));

    // corruption only inside the mask changes LD but not LD-M
    let mut g = f.clone();
    for i in 0..60 {
        g.dx[i] = 40.0;
    }
    assert_eq!(local_distortion_masked(&g, &half).unwrap(), 5.0);
    assert!(local_distortion(&g).unwrap() > 5.0);
}

#[test]
fn local_distortion_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut f = DisplacementField::constant(9, 11, 0.0, 0.0);
    for i in 0..99 {
        f.dx[i] = rng.gen_range(-5.0..5.0);
        f.dy[i] = rng.gen_range(-5.0..5.0);
        f.valid[i] = rng.gen_bool(0.7);
    }
    let mut s = 0.0;
    let mut n = 0.0;
    for i in 0..99 {
        if f.valid[i] {
            s += (f.dx[i].powi(2) + f.dy[i].powi(2)).sqrt();
            n += 1.0;
        }
    }
    assert!((local_distortion(&f).unwrap() - s / n).abs() < 1e-9);
}

#[test]
fn matcher_identity_is_zero() {
    let x = text_texture(96, 96, 2);
    let f = dense_match(&x, &x).unwrap();
    assert!(f.valid_count() > 1000);
    let max = f.dx.iter().chain(&f.dy).fold(0f64, |m, v| m.max(v.abs()));
    assert_eq!(max, 0.0);
}

#[test]
fn matcher_constant_images_are_invalid() {
    let c = GrayImage::from_fn(64, 64, |_, _| 0.5);
    let f = dense_match(&c, &text_texture(64, 64, 1)).unwrap();
    assert_eq!(f.valid_count(), 0);
    assert!(matches!(local_distortion(&f), Err(MetricsError::NoValidMatches)));
}

#[test]
fn matcher_recovers_shift() {
    let gt = text_texture(128, 128, 5);
    let rect = GrayImage::from_fn(128, 128, |y, x| gt.clamped(y as isize, x as isize - 3));
    let f = dense_match(&gt, &rect).unwrap();
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for y in 16..112 {
        for x in 16..112 {
            let i = y * 128 + x;
            if f.valid[i] {
                sx += f.dx[i];
                sy += f.dy[i];
                n += 1.0;
            }
        }
    }
    assert!(n > 1000.0);
    assert!((sx / n - 3.0).abs() < 0.5 && (sy / n).abs() < 0.5, "mean ({}, {})", sx / n, sy / n);
}

#[test]
fn edit_distance_examples() {
    assert_eq!(edit_distance("same", "same"), EditCounts::default());
    let e = edit_distance("", "abc");
    assert_eq!((e.total, e.insertions), (3, 3));
    assert_eq!(edit_distance("kitten", "sitting").total, 3);
    let e = edit_distance("ab", "");
    assert_eq!((e.total, e.deletions), (2, 2));
    assert_eq!(edit_distance("añb", "ab").total, 1);
}

#[test]
fn cer_examples() {
    assert_eq!(cer("hello", "hello").unwrap(), 0.0);
    assert_eq!(cer("ab", "").unwrap(), 1.0);
    // N_c counts the reference: "sitting" as reference gives 3/7
    assert!((cer("sitting", "kitten").unwrap() - 3.0 / 7.0).abs() < 1e-12);
    assert!((cer("kitten", "sitting").unwrap() - 0.5).abs() < 1e-12);
    assert!(cer("ab", "abcdefgh").unwrap() > 1.0);
    assert!(matches!(cer("", "x"), Err(MetricsError::EmptyReference)));
}

fn single_pair(id: &str, ld_shift: f64) -> MetricRow {
    MetricRow {
        id: id.into(),
        mssim: 0.5,
        mssim_m: 0.5,
        ld: Some(ld_shift),
        ld_m: Some(ld_shift),
        ed: None,
        cer: None,
    }
}

#[test]
fn report_aggregation() {
    let one = MetricReport::from_rows(vec![single_pair("a", 4.0)]);
    assert_eq!(one.means.ld_m, one.rows[0].ld_m);
    let two = MetricReport::from_rows(vec![single_pair("a", 4.0), single_pair("b", 6.0)]);
    assert_eq!(two.means.ld_m, Some(5.0));
    assert_eq!(two.counts.ed, 0);
    assert_eq!(two.means.cer, None);
    let csv = two.to_csv().unwrap();
    assert!(csv.starts_with("id,mssim,mssim_m,ld,ld_m,ed,cer\n"));
    assert!(csv.contains("a,0.5,0.5,4.0,4.0,,\n"));
    let json: serde_json::Value = serde_json::from_str(&two.summary_json()).unwrap();
    assert_eq!(json["counts"]["pairs"], 2);
    assert!(format_aggregate(&two.means).starts_with("MSSIM-M 0.5000  LD-M 5.00  ED n/a  CER n/a"));
}

#[test]
fn identity_pair_row() {
    let img = to_raster(&text_texture(120, 100, 9));
    let pair = EvalPair {
        id: "p".into(),
        rectified: img.clone(),
        ground_truth: img,
        validity: None,
        text: Some(TextPair {
            reference: "lorem ipsum".into(),
            hypothesis: "lorem ipsum".into(),
        }),
    };
    let report = evaluate_set(&[pair], 1).unwrap();
    let r = &report.rows[0];
    assert!((r.mssim - 1.0).abs() < 1e-6 && (r.mssim_m - 1.0).abs() < 1e-6);
    assert_eq!((r.ld, r.ld_m, r.ed, r.cer), (Some(0.0), Some(0.0), Some(0), Some(0.0)));
    assert_eq!(report.means.ld_m, Some(0.0));
}


fn bilinear(g: &GrayImage, u: f64, v: f64) -> f64 {
    let (x0, y0) = (u.floor(), v.floor());
    let (fx, fy) = (u - x0, v - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    (1.0 - fy) * ((1.0 - fx) * g.clamped(y0, x0) + fx * g.clamped(y0, x0 + 1))
        + fy * ((1.0 - fx) * g.clamped(y0 + 1, x0) + fx * g.clamped(y0 + 1, x0 + 1))
}

#[test]
fn matcher_tracks_sinusoidal_warp() {
    let (h, w) = (256, 256);
    let gt = text_texture(h, w, 12);
    let disp = |x: f64, y: f64| {
        (
            5.0 * (std::f64::consts::TAU * y / 160.0).sin(),
            5.0 * (std::f64::consts::TAU * x / 200.0 + 0.7).sin(),
        )
    };
    // rectified(q) = gt(q + disp(q))
    let rect = GrayImage::from_fn(h, w, |y, x| {
        let (du, dv) = disp(x as f64, y as f64);
        bilinear(&gt, x as f64 + du, y as f64 + dv)
    });
    let mut truth = DisplacementField::constant(h, w, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            // q + disp(q) = p, by fixed-point iteration
            let (px, py) = (x as f64, y as f64);
            let (mut qx, mut qy) = (px, py);
            for _ in 0..50 {
                let (du, dv) = disp(qx, qy);
                qx = px - du;
                qy = py - dv;
            }
            let i = y * w + x;
            truth.dx[i] = qx - px;
            truth.dy[i] = qy - py;
            truth.valid[i] = (24..h - 24).contains(&y) && (24..w - 24).contains(&x);
        }
    }
    let f = dense_match(&gt, &rect).unwrap();
    let epe = f.endpoint_error(&truth).unwrap();
    assert!(epe < 1.0, "mean endpoint error {epe}");
}
