//! AdamW and the one-cycle learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use super::AutodiffError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Optimizer state: per-parameter moments plus the number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T> {
    pub step: u64,
    pub moments: Vec<Moments<T>>,
}

impl<T: Real> AdamWState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        Self {
            step: 0,
            moments: params
                .into_iter()
                .map(|p| Moments {
                    m: Tensor::zeros(p.shape()),
                    v: Tensor::zeros(p.shape()),
                })
                .collect(),
        }
    }
}

/// One decoupled-weight-decay Adam step applied in place.
pub fn adamw_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamWState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<(), AutodiffError> {
    if params.len() != grads.len() || params.len() != state.moments.len() {
        return Err(AutodiffError::InvalidArgument {
            op: "adamw_step",
            msg: format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                state.moments.len()
            ),
        });
    }
    for ((p, g), mo) in params.iter().zip(grads).zip(&state.moments) {
        if p.shape() != g.shape() || p.shape() != mo.m.shape() || p.shape() != mo.v.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let bc1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t));
    let bc2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t));
    let eps = T::from_f64_lossy(cfg.eps);
    let lr_t = T::from_f64_lossy(lr);
    let decay = T::from_f64_lossy(1.0 - lr * cfg.weight_decay);
    for ((p, g), mo) in params.iter_mut().zip(grads).zip(state.moments.iter_mut()) {
        let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
        for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = b1 * m[i] + (T::one() - b1) * gv;
            v[i] = b2 * v[i] + (T::one() - b2) * gv * gv;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *pv = *pv * decay - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Ratio between the peak and the starting learning rate.
pub const ONECYCLE_START_DIV: f64 = 25.0;
/// Ratio between the peak and the final learning rate.
pub const ONECYCLE_END_DIV: f64 = 1e4;

/// Index of the step at which the schedule peaks.
pub fn onecycle_peak_step(total_steps: usize, warmup_frac: f64) -> usize {
    ((warmup_frac * total_steps as f64).round() as usize).min(total_steps.saturating_sub(1))
}

/// Linear warm-up from `max_lr / 25` to `max_lr`, then cosine decay to
/// `max_lr / 1e4` at the final step.
pub fn onecycle_lr(step: usize, total_steps: usize, max_lr: f64, warmup_frac: f64) -> Result<f64, AutodiffError> {
    if step >= total_steps {
        return Err(AutodiffError::InvalidArgument {
            op: "onecycle_lr",
            msg: format!("step {step} outside 0..{total_steps}"),
        });
    }
    let start = max_lr / ONECYCLE_START_DIV;
    let end = max_lr / ONECYCLE_END_DIV;
    let peak = onecycle_peak_step(total_steps, warmup_frac);
    if step == peak {
        return Ok(max_lr);
    }
    if step < peak {
        return Ok(start + (max_lr - start) * step as f64 / peak as f64);
    }
    let span = (total_steps - 1 - peak) as f64;
    let progress = (step - peak) as f64 / span;
    Ok(end + (max_lr - end) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
