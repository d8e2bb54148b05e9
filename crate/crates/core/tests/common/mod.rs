//! Property suites shared by the integration tests and the acceptance run.
//! Each suite returns a [`Criterion`] holding its individual checks, so a
//! caller can either assert on it or report it.

#![allow(dead_code)]

pub mod gradients;
pub mod oracles;
pub mod training;

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unwarp_core::autodiff::Tensor;
use unwarp_core::image::{Channels, ImageRaster};

#[derive(Clone, Debug)]
pub struct Check {
    pub label: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct Criterion {
    pub name: &'static str,
    pub checks: Vec<Check>,
    pub elapsed: Duration,
}

impl Criterion {
    pub fn new(name: &'static str) -> Self {
        Self {
            name,
            checks: Vec::new(),
            elapsed: Duration::ZERO,
        }
    }

    pub fn check(&mut self, label: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            label: label.into(),
            pass,
            detail: detail.into(),
        });
    }

    pub fn pass(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }

    /// Panics with every failed check; for the focused test targets.
    pub fn assert_pass(&self) {
        assert!(self.pass(), "{self}");
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} {} ({:.1}s)",
            if self.pass() { "PASS" } else { "FAIL" },
            self.name,
            self.elapsed.as_secs_f64()
        )?;
        for c in &self.checks {
            writeln!(f, "    [{}] {}: {}", if c.pass { "ok" } else { "FAILED" }, c.label, c.detail)?;
        }
        Ok(())
    }
}

/// Runs `body` and stamps the wall time on its criterion.
pub fn timed(body: impl FnOnce() -> Criterion) -> Criterion {
    let t = Instant::now();
    let mut c = body();
    c.elapsed = t.elapsed();
    c
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Smooth multi-wave RGB image in `[0.1, 0.9]`.
pub fn smooth_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageRaster {
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| (rng.gen_range(0.02..0.12), rng.gen_range(0.02..0.12), rng.gen_range(0.0..6.28)))
        .collect();
    ImageRaster::from_fn(h, w, Channels::Rgb, |y, x, c| {
        let s: f64 = waves
            .iter()
            .map(|(fx, fy, p)| (fx * x as f64 + fy * y as f64 + p + 0.7 * c as f64).sin())
            .sum();
        (0.5 + 0.1 * s) as f32
    })
}
