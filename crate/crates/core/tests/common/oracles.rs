//! Warp/flow oracles, architecture shapes, metric oracles and protocol
//! constants.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;

use unwarp_core::autodiff::Graph;
use unwarp_core::flow::{compose_crop_flow, crop_preimage_box, identity_flow, warp, CropRect, ValidityMask, WarpFlow};
use unwarp_core::image::{Channels, ImageRaster};
use unwarp_core::metrics::{
    cer, dense_match, edit_distance, local_distortion, msssim, msssim_masked, msssim_pair, msssim_weights,
    protocol_resize, DisplacementField, GrayImage, MSSSIM_WEIGHTS, PROTOCOL_AREA,
};
use unwarp_core::model::{image_tensor, model_forward, ModelConfig, ParamStore, TrainConfig};
use unwarp_core::synth::{
    generate_indexed, interior_agreement, max_flow_step, render_document, CropCategory, CONSISTENCY_TOLERANCE,
    MAX_FLOW_STEP,
};

use super::{rng, smooth_image, Criterion};

// ---------------------------------------------------------------- warp / flow

fn noise_image(seed: u64, h: usize, w: usize, channels: Channels) -> ImageRaster {
    let mut r = rng(seed);
    ImageRaster::from_fn(h, w, channels, |_, _, _| r.gen::<f32>())
}

/// Random smooth map from a `ph × pw` rectified grid into a 128×128 canvas.
fn random_page_flow(r: &mut impl Rng) -> WarpFlow {
    let (ph, pw) = (r.gen_range(40..72), r.gen_range(40..72));
    let (ox, oy) = (r.gen_range(4.0..20.0), r.gen_range(4.0..20.0));
    let (sx, sy) = (r.gen_range(0.9..1.2), r.gen_range(0.9..1.2));
    let (a, b) = (r.gen_range(0.0..4.0), r.gen_range(0.0..4.0));
    let (fa, fb) = (r.gen_range(0.02..0.12), r.gen_range(0.02..0.12));
    let (pa, pb) = (r.gen_range(0.0..6.28), r.gen_range(0.0..6.28));
    let shear = r.gen_range(-0.1..0.1);
    WarpFlow::from_fn(ph, pw, |y, x| {
        let (xf, yf) = (x as f64, y as f64);
        (
            ox + sx * xf + shear * yf + a * (fa * yf + pa).sin(),
            oy + sy * yf + b * (fb * xf + pb).sin(),
        )
    })
    .unwrap()
}

/// Worst doubly-valid interior gap between warping the crop with the
/// composed flow and warping the full image with the restricted flow.
pub fn compose_oracle(cases: usize, seed: u64) -> (usize, f64) {
    let mut r = rng(seed);
    let mut done = 0;
    let mut worst = 0.0f64;
    while done < cases {
        let canvas = smooth_image(&mut r, 128, 128);
        let page_flow = random_page_flow(&mut r);
        let (x, y) = (r.gen_range(0..80), r.gen_range(0..80));
        let crop = CropRect {
            x,
            y,
            width: r.gen_range(32..=128 - x),
            height: r.gen_range(32..=128 - y),
        };
        let Ok(b) = crop_preimage_box(&page_flow, &crop) else { continue };
        let composed = compose_crop_flow(&page_flow, &crop, b.height, b.width).unwrap();
        let crop_img = canvas.crop(crop.x, crop.y, crop.width, crop.height);
        let (via_crop, m_crop) = warp(&crop_img, &composed, 0.0);
        let (via_full, m_full) = warp(&canvas, &page_flow.restrict(b.x, b.y, b.width, b.height), 0.0);
        let Some(gap) = interior_agreement(&via_crop, &m_crop, &via_full, &m_full) else { continue };
        worst = worst.max(gap);
        done += 1;
    }
    (done, worst)
}

pub fn warp_suite() -> Criterion {
    let mut c = Criterion::new("warp/flow oracles: identity, bilinear convexity, crop composition, flow continuity");

    let mut exact = true;
    for (k, (h, w, ch)) in [(17, 23, Channels::Gray), (32, 32, Channels::Rgb), (64, 48, Channels::Rgb)].into_iter().enumerate() {
        let img = noise_image(k as u64, h, w, ch);
        let (out, mask) = warp(&img, &identity_flow(h, w), 0.25);
        exact &= out == img && mask.all_valid();
    }
    c.check("identity warp is bit-exact", exact, "3 images, gray and RGB");

    let mut r = rng(41);
    let mut violations = 0usize;
    let mut samples = 0usize;
    for k in 0..20 {
        let img = noise_image(100 + k, 40, 40, Channels::Rgb);
        let flow = WarpFlow::from_fn(24, 32, |_, _| (r.gen_range(0.0..39.0), r.gen_range(0.0..39.0))).unwrap();
        let (out, mask) = warp(&img, &flow, 0.0);
        for y in 0..24 {
            for x in 0..32 {
                let (u, v) = flow.at(y, x);
                let (x0, y0) = (u.floor() as usize, v.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(39), (y0 + 1).min(39));
                for ch in 0..3 {
                    let corners = [img.get(y0, x0, ch), img.get(y0, x1, ch), img.get(y1, x0, ch), img.get(y1, x1, ch)];
                    let lo = corners.iter().copied().fold(f32::INFINITY, f32::min);
                    let hi = corners.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let o = out.get(y, x, ch);
                    samples += 1;
                    if !mask.get(y, x) || o < lo - 1e-6 || o > hi + 1e-6 {
                        violations += 1;
                    }
                }
            }
        }
    }
    c.check(
        "bilinear samples lie within their four source pixels",
        violations == 0,
        format!("{violations} violations in {samples} samples"),
    );

    let (cases, worst) = compose_oracle(100, 43);
    c.check(
        "crop composition agrees with full-image warp",
        cases == 100 && worst < CONSISTENCY_TOLERANCE,
        format!("{cases} random flows, worst mean gap {worst:.2e} (limit {CONSISTENCY_TOLERANCE:.0e})"),
    );

    let mut worst_step = 0.0f32;
    let mut worst_consistency = 0.0f64;
    let n = 60;
    for i in 0..n {
        let s = generate_indexed(31, i, CropCategory::ALL[i as usize % 3], (64, 64)).unwrap();
        worst_step = worst_step.max(max_flow_step(&s.record.flow));
        worst_consistency = worst_consistency.max(s.consistency);
    }
    c.check(
        "emitted ground truths are continuous",
        worst_step < MAX_FLOW_STEP,
        format!("{n} samples, largest neighbour step {worst_step:.2} px (limit {MAX_FLOW_STEP})"),
    );
    c.check(
        "emitted samples pass their consistency oracle",
        worst_consistency < CONSISTENCY_TOLERANCE,
        format!("worst gap {worst_consistency:.2e}"),
    );
    c
}

// ---------------------------------------------------------------- shapes

pub fn shape_suite(sizes: &[(usize, usize)], convexity_cells: usize) -> Criterion {
    let mut c = Criterion::new("architecture shapes: stride-8/16/32 pyramid, full-resolution flow, convex head");
    let mut cell_pool: Vec<(Vec<f32>, Vec<f32>, Vec<f32>, usize, usize)> = Vec::new();
    for &(h, w) in sizes {
        let cfg = ModelConfig::toy().with_size(h, w);
        let mut params = ParamStore::<f32>::init(&cfg, 3).unwrap();
        // a non-trivial coarse field for the hull check
        for (i, v) in params.get_mut("head.flow2.w").unwrap().data_mut().iter_mut().enumerate() {
            *v = ((i % 7) as f32 - 3.0) * 2e-3;
        }
        let mut g = Graph::<f32>::new();
        let p = params.bind(&mut g, false);
        let img = noise_image(h as u64 * 1000 + w as u64, h, w, Channels::Rgb);
        let x = g.constant(image_tensor(&img));
        let out = model_forward(&mut g, &cfg, &p, x).unwrap();
        let got = [
            g.shape(out.pyramid.e2).to_vec(),
            g.shape(out.pyramid.e4).to_vec(),
            g.shape(out.pyramid.e6).to_vec(),
            g.shape(out.flow).to_vec(),
        ];
        let want = [
            vec![h / 8, w / 8, cfg.c_b],
            vec![h / 16, w / 16, cfg.c_b],
            vec![h / 32, w / 32, cfg.c_b],
            vec![h, w, 2],
        ];
        c.check(format!("{h}x{w}"), got == want, format!("pyramid/flow {got:?}"));
        cell_pool.push((
            g.value(out.head.coarse).data().to_vec(),
            g.value(out.flow).data().to_vec(),
            g.value(out.head.weights.expect("learned upsampling")).data().to_vec(),
            h / 8,
            w / 8,
        ));
    }

    // sample cells across every run
    let mut cells: Vec<(usize, usize)> = cell_pool
        .iter()
        .enumerate()
        .flat_map(|(k, (_, _, _, h, w))| (0..h * w).map(move |i| (k, i)))
        .collect();
    cells.shuffle(&mut rng(17));
    cells.truncate(convexity_cells);
    let mut bad = 0usize;
    let mut worst_sum = 0.0f64;
    for &(k, cell) in &cells {
        let (coarse, fine, weights, h, w) = &cell_pool[k];
        let (h, w) = (*h, *w);
        let (i, j) = (cell / w, cell % w);
        let fw = w * 8;
        for sub in 0..64 {
            let wrow = &weights[(cell * 64 + sub) * 9..][..9];
            worst_sum = worst_sum.max((wrow.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
            if wrow.iter().any(|&v| v < 0.0) {
                bad += 1;
            }
            let (a, b) = (sub / 8, sub % 8);
            for ch in 0..2 {
                let mut lo = f32::INFINITY;
                let mut hi = f32::NEG_INFINITY;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let ii = (i as i64 + di).clamp(0, h as i64 - 1) as usize;
                        let jj = (j as i64 + dj).clamp(0, w as i64 - 1) as usize;
                        let v = coarse[(ii * w + jj) * 2 + ch];
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                let f = fine[((i * 8 + a) * fw + j * 8 + b) * 2 + ch];
                let tol = 1e-4 * hi.abs().max(1.0);
                if f < lo - tol || f > hi + tol {
                    bad += 1;
                }
            }
        }
    }
    c.check(
        "flow head is a convex combination of its 3x3 coarse neighbourhood",
        cells.len() == convexity_cells && bad == 0 && worst_sum < 1e-5,
        format!("{} cells x 64 sub-pixels, {bad} violations, max |sum w - 1| {worst_sum:.1e}", cells.len()),
    );
    c
}

// ---------------------------------------------------------------- metrics

/// Top-down memoised Levenshtein distance, written independently of the
/// library's bottom-up table.
pub fn levenshtein_oracle(a: &[char], b: &[char]) -> usize {
    fn go(a: &[char], b: &[char], memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        if let Some(&v) = memo.get(&(a.len(), b.len())) {
            return v;
        }
        let sub = go(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]);
        let del = go(&a[1..], b, memo) + 1;
        let ins = go(a, &b[1..], memo) + 1;
        let v = sub.min(del).min(ins);
        memo.insert((a.len(), b.len()), v);
        v
    }
    go(a, b, &mut HashMap::new())
}

fn random_string(r: &mut impl Rng, max_len: usize) -> String {
    const ALPHABET: [char; 5] = ['a', 'b', 'c', 'ñ', ' '];
    let n = r.gen_range(0..=max_len);
    (0..n).map(|_| ALPHABET[r.gen_range(0..ALPHABET.len())]).collect()
}

fn gray(img: &ImageRaster) -> GrayImage {
    GrayImage::from_raster(img)
}

pub fn edit_distance_axioms(pairs: usize, seed: u64) -> (usize, Vec<String>) {
    let mut r = rng(seed);
    let mut failures = Vec::new();
    for _ in 0..pairs {
        let a = random_string(&mut r, 12);
        let b = random_string(&mut r, 12);
        let z = random_string(&mut r, 12);
        let (ac, bc): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
        let e = edit_distance(&a, &b);
        let oracle = levenshtein_oracle(&ac, &bc);
        let ok = e.total == oracle
            && e.total == e.deletions + e.insertions + e.substitutions
            && bc.len() + e.deletions == ac.len() + e.insertions
            && edit_distance(&b, &a).total == e.total
            && edit_distance(&a, &a).total == 0
            && (e.total == 0) == (a == b)
            && e.total <= edit_distance(&a, &z).total + edit_distance(&z, &b).total
            && e.total >= ac.len().abs_diff(bc.len())
            && e.total <= ac.len().max(bc.len());
        if !ok {
            failures.push(format!("{a:?} vs {b:?}: {e:?}, oracle {oracle}"));
        }
    }
    (pairs, failures)
}

pub fn metric_suite() -> Criterion {
    let mut c = Criterion::new("metric oracles: MS-SSIM, masked MS-SSIM, LD, dense matcher, ED, CER");

    let doc = render_document(3, 256, 256).image;
    let g = gray(&doc);
    let self_sim = msssim(&g, &g).unwrap();
    c.check("msssim(x, x) = 1", (self_sim - 1.0).abs() <= 1e-6, format!("{self_sim:.12}"));

    let other = render_document(4, 240, 260).image;
    let plain = msssim_pair(&other, &doc).unwrap();
    let masked = msssim_masked(&other, &doc, &ValidityMask::filled(240, 260, false)).unwrap();
    c.check(
        "masked MS-SSIM with an empty mask equals MS-SSIM",
        masked == plain,
        format!("{masked} vs {plain}"),
    );

    let ld = local_distortion(&DisplacementField::constant(40, 30, 3.0, 4.0)).unwrap();
    c.check("LD of a constant (3, 4) field", ld == 5.0, format!("{ld}"));

    let gt = gray(&render_document(8, 192, 192).image);
    let rect = GrayImage::from_fn(192, 192, |y, x| gt.clamped(y as isize, x as isize - 3));
    let f = dense_match(&gt, &rect).unwrap();
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for y in 16..176 {
        for x in 16..176 {
            let i = y * 192 + x;
            if f.valid[i] {
                sx += f.dx[i];
                sy += f.dy[i];
                n += 1;
            }
        }
    }
    let (mx, my) = (sx / n.max(1) as f64, sy / n.max(1) as f64);
    c.check(
        "dense matcher recovers a 3 px shift",
        n > 500 && (mx - 3.0).abs() <= 0.5 && my.abs() <= 0.5,
        format!("mean ({mx:.3}, {my:.3}) over {n} valid pixels"),
    );

    let k = edit_distance("kitten", "sitting");
    c.check("ED(kitten, sitting) = 3", k.total == 3, format!("{k:?}"));

    let (pairs, failures) = edit_distance_axioms(1000, 59);
    c.check(
        "ED metric axioms and DP oracle",
        failures.is_empty(),
        format!("{pairs} random pairs, {} failures {:?}", failures.len(), failures.first()),
    );

    let mut r = rng(61);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut reference = random_string(&mut r, 20);
        if reference.is_empty() {
            reference.push('a');
        }
        let hyp = random_string(&mut r, 20);
        let e = edit_distance(&reference, &hyp);
        let expect = (e.deletions + e.insertions + e.substitutions) as f64 / reference.chars().count() as f64;
        worst = worst.max((cer(&reference, &hyp).unwrap() - expect).abs());
    }
    c.check("CER = (d + i + s) / N on 100 pairs", worst == 0.0, format!("max deviation {worst:e}"));
    c
}

// ---------------------------------------------------------------- protocol

pub fn protocol_suite() -> Criterion {
    let mut c = Criterion::new("protocol constants: evaluation area, MS-SSIM weights, schedule peak");

    let mut r = rng(71);
    let mut sizes = vec![(748, 800), (1496, 1600), (100, 100), (3000, 2000), (480, 640), (33, 1200)];
    sizes.extend((0..30).map(|_| (r.gen_range(64..2600), r.gen_range(64..2600))));
    let mut worst = 0.0f64;
    for &(h, w) in &sizes {
        let out = protocol_resize(&ImageRaster::filled(h, w, Channels::Gray, 0.5));
        worst = worst.max(((out.height() * out.width()) as f64 - PROTOCOL_AREA).abs() / PROTOCOL_AREA);
    }
    c.check(
        "protocol resize hits 598,400 px +-1%",
        worst <= 0.01,
        format!("{} input sizes, worst deviation {:.3}%", sizes.len(), worst * 100.0),
    );

    let listed = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let renorm = msssim_weights();
    c.check(
        "MS-SSIM level weights",
        MSSSIM_WEIGHTS == listed && (renorm.iter().sum::<f64>() - 1.0).abs() < 1e-12,
        format!("{MSSSIM_WEIGHTS:?}, renormalised sum {}", renorm.iter().sum::<f64>()),
    );

    let mut detail = Vec::new();
    let mut ok = true;
    for steps in [500, 1000, 120] {
        let tc = TrainConfig {
            steps,
            ..Default::default()
        };
        let lrs: Vec<f64> = (0..steps).map(|s| tc.lr_at(s)).collect();
        let argmax = (0..steps).max_by(|&a, &b| lrs[a].total_cmp(&lrs[b])).unwrap();
        let peak = lrs[argmax];
        ok &= tc.lr_max == 1e-4 && peak == 1e-4 && argmax == steps / 10 && tc.peak_step() == steps / 10;
        detail.push(format!("{steps} steps: peak {peak:e} at step {argmax}"));
    }
    c.check("one-cycle schedule peaks at 1e-4 at 10% of steps", ok, detail.join("; "));
    c
}
