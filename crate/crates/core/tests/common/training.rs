//! Learning sanity, determinism/persistence and ablation plumbing.

use std::path::Path;

use unwarp_core::flow::{apply_sentinel, flow_l1, read_wfl, write_wfl, WarpFlow, WFL_FLAG_SENTINEL};
use unwarp_core::model::{
    predict_flow, train, Checkpoint, FlowTarget, ModelConfig, ParamStore, QueryMode, TrainConfig, TrainOptions,
    TrainSample, UpsampleMode,
};
use unwarp_core::synth::{build_dataset, generate_indexed, load_dataset, BuildOptions, CategoryMix, CropCategory};

use super::Criterion;

/// The toy set: `n` generated 64×64 samples cycling through the crop categories.
pub fn toy_samples(seed: u64, n: usize) -> Vec<TrainSample> {
    (0..n as u64)
        .map(|i| {
            let s = generate_indexed(seed, i, CropCategory::ALL[i as usize % 3], (64, 64)).unwrap();
            TrainSample {
                image: s.record.image,
                flow: s.record.flow,
            }
        })
        .collect()
}

fn mean_error(cfg: &ModelConfig, params: &ParamStore<f32>, samples: &[TrainSample]) -> f64 {
    samples
        .iter()
        .map(|s| flow_l1(&predict_flow(cfg, params, &s.image).unwrap(), &s.flow).unwrap())
        .sum::<f64>()
        / samples.len() as f64
}

/// Largest overfit run allowed.
pub const OVERFIT_STEPS: usize = 500;
/// Final training error must fall below this fraction of the initial one.
pub const OVERFIT_RATIO: f64 = 0.10;
/// Held-out error of the trained model must be this many times smaller
/// than the untrained model's.
pub const HELD_OUT_GAIN: f64 = 2.0;
/// Runtime bound of the learning run.
pub const LEARNING_BUDGET_SECS: f64 = 30.0 * 60.0;

pub struct LearningOutcome {
    pub train_before: f64,
    pub train_after: f64,
    pub held_before: f64,
    pub held_after: f64,
    pub seconds: f64,
}

pub fn overfit_run() -> LearningOutcome {
    let t = std::time::Instant::now();
    let mut all = toy_samples(5, 9);
    let held = vec![all.pop().unwrap()];
    let cfg = ModelConfig::toy();
    let params = ParamStore::<f32>::init(&cfg, 1).unwrap();
    let train_before = mean_error(&cfg, &params, &all);
    let held_before = mean_error(&cfg, &params, &held);
    // memorisation run: no colour augmentation
    let tc = TrainConfig {
        steps: OVERFIT_STEPS,
        batch: 4,
        lr_max: 1e-4,
        jitter: None,
        ..Default::default()
    };
    let out = train(&all, Checkpoint::new(cfg.clone(), params).unwrap(), &tc, &TrainOptions::default()).unwrap();
    LearningOutcome {
        train_before,
        train_after: mean_error(&cfg, &out.checkpoint.params, &all),
        held_before,
        held_after: mean_error(&cfg, &out.checkpoint.params, &held),
        seconds: t.elapsed().as_secs_f64(),
    }
}

pub fn learning_suite() -> (Criterion, LearningOutcome) {
    let mut c = Criterion::new("learning sanity: overfit 8 toy samples (<= 500 steps, batch 4, lr 1e-4) and generalise");
    let o = overfit_run();
    let ratio = o.train_after / o.train_before;
    c.check(
        "training error below 10% of its initial value",
        ratio < OVERFIT_RATIO,
        format!("{:.3} -> {:.3} px ({:.1}%)", o.train_before, o.train_after, ratio * 100.0),
    );
    c.check(
        "runtime under 30 min",
        o.seconds < LEARNING_BUDGET_SECS,
        format!("{:.0}s", o.seconds),
    );
    let gain = o.held_before / o.held_after;
    c.check(
        "held-out error at least 2x below the untrained model's",
        gain >= HELD_OUT_GAIN,
        format!("{:.3} -> {:.3} px ({gain:.2}x)", o.held_before, o.held_after),
    );
    (c, o)
}

fn files_equal(a: &Path, b: &Path) -> bool {
    std::fs::read(a).ok() == std::fs::read(b).ok()
}

fn flow_bits(f: &WarpFlow) -> Vec<u32> {
    f.u_map().iter().chain(f.v_map()).map(|v| v.to_bits()).collect()
}

pub fn determinism_suite() -> Criterion {
    let mut c = Criterion::new("determinism and persistence: seeded dataset and checkpoint, bit-exact files");
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let mix = CategoryMix::default();
    let rows = build_dataset(6, (64, 64), &mix, &a, 77, &BuildOptions { jobs: 1, ..Default::default() }).unwrap();
    build_dataset(6, (64, 64), &mix, &b, 77, &BuildOptions { jobs: 2, ..Default::default() }).unwrap();
    let mut same = files_equal(&a.join("manifest.jsonl"), &b.join("manifest.jsonl"));
    c.check("dataset manifest is byte-identical across runs", same, format!("{} rows", rows.len()));
    for r in &rows {
        same &= files_equal(&a.join(&r.image), &b.join(&r.image)) && files_equal(&a.join(&r.flow), &b.join(&r.flow));
    }
    c.check("dataset images and flows are byte-identical", same, "single- vs multi-threaded build");

    let samples: Vec<TrainSample> = load_dataset(&a)
        .unwrap()
        .into_iter()
        .map(|s| TrainSample::fit(&s.record.image, &s.record.flow, &ModelConfig::tiny()).unwrap())
        .collect();
    let cfg = ModelConfig::tiny();
    let tc = TrainConfig {
        steps: 4,
        batch: 2,
        seed: 77,
        ..Default::default()
    };
    let run = || {
        let init = Checkpoint::new(cfg.clone(), ParamStore::init(&cfg, 77).unwrap()).unwrap();
        train(&samples, init, &tc, &TrainOptions::default()).unwrap().checkpoint
    };
    let (c1, c2) = (run(), run());
    let (p1, p2) = (dir.path().join("one.ckpt"), dir.path().join("two.ckpt"));
    c1.save(&p1).unwrap();
    c2.save(&p2).unwrap();
    c.check(
        "seeded training gives a byte-identical checkpoint",
        files_equal(&p1, &p2),
        format!("{} bytes", std::fs::metadata(&p1).map(|m| m.len()).unwrap_or(0)),
    );

    let loaded = Checkpoint::load(&p1).unwrap();
    let p3 = dir.path().join("three.ckpt");
    loaded.save(&p3).unwrap();
    c.check(
        "checkpoint round-trips bit-exactly",
        files_equal(&p1, &p3) && loaded.params == c1.params && loaded.config == c1.config && loaded.step == c1.step,
        "load -> save -> compare",
    );

    let mut ok = true;
    for (k, s) in samples.iter().take(3).enumerate() {
        for (flow, flags) in [(s.flow.clone(), 0), (apply_sentinel(&s.flow, 32, 32), WFL_FLAG_SENTINEL)] {
            let p = dir.path().join(format!("f{k}-{flags}.wfl"));
            let q = dir.path().join(format!("g{k}-{flags}.wfl"));
            write_wfl(&p, &flow, flags).unwrap();
            let (back, back_flags) = read_wfl(&p).unwrap();
            write_wfl(&q, &back, back_flags).unwrap();
            ok &= flow_bits(&back) == flow_bits(&flow) && back_flags == flags && files_equal(&p, &q);
        }
    }
    c.check(".wfl files round-trip bit-exactly", ok, "3 flows, with and without sentinel flag");
    c
}

/// Steps per ablation run: the full toy schedule.
pub const ABLATION_STEPS: usize = 500;

pub fn ablation_suite(steps: usize) -> Criterion {
    let mut c = Criterion::new("ablation plumbing: query x upsampling switches and sentinel flow train to completion");
    let samples = toy_samples(13, 8);
    let variants = [
        (QueryMode::Learned, UpsampleMode::Learned, FlowTarget::Continuous),
        (QueryMode::Learned, UpsampleMode::Bilinear, FlowTarget::Continuous),
        (QueryMode::Fixed, UpsampleMode::Learned, FlowTarget::Continuous),
        (QueryMode::Fixed, UpsampleMode::Bilinear, FlowTarget::Continuous),
        (QueryMode::Learned, UpsampleMode::Learned, FlowTarget::Sentinel),
    ];
    for (query, upsample, target) in variants {
        let cfg = ModelConfig {
            query,
            upsample,
            ..ModelConfig::toy()
        };
        let tc = TrainConfig {
            steps,
            target,
            ..Default::default()
        };
        let t = std::time::Instant::now();
        let init = Checkpoint::new(cfg.clone(), ParamStore::init(&cfg, 2).unwrap()).unwrap();
        let label = format!("{query:?} queries, {upsample:?} upsampling, {target:?} flow");
        match train(&samples, init, &tc, &TrainOptions::default()) {
            Ok(out) => {
                let finite = out.losses.iter().all(|l| l.loss.is_finite());
                let first = out.losses.first().map_or(f64::NAN, |l| l.loss);
                let last = out.losses.last().map_or(f64::NAN, |l| l.loss);
                c.check(
                    label,
                    finite && out.losses.len() == steps && out.checkpoint.step == steps as u64,
                    format!("{} steps, loss {first:.3} -> {last:.3}, {:.0}s", out.losses.len(), t.elapsed().as_secs_f64()),
                );
            }
            Err(e) => c.check(label, false, e.to_string()),
        }
    }
    c
}
