//! Mini-batch training on the mean-L1 flow loss.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::ModelConfig;
use super::network::{image_tensor, model_forward};
use super::params::ParamStore;
use super::ModelError;
use crate::autodiff::optim::{onecycle_peak_step, Moments};
use crate::autodiff::{adamw_step, onecycle_lr, AdamWConfig, AdamWState, AutodiffError, Graph, Real, Tensor};
use crate::flow::{apply_sentinel, resize_flow, WarpFlow};
use crate::image::ImageRaster;
use crate::synth::{derive_seed, hsv_jitter};

/// Ground-truth variant the loss is computed against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowTarget {
    Continuous,
    /// Out-of-input targets replaced by the sentinel value.
    Sentinel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub hue: f64,
    pub saturation: f64,
    pub value: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            hue: 0.05,
            saturation: 0.2,
            value: 0.2,
        }
    }
}

/// Run parameters that must stay fixed across a resumed run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr_max: f64,
    pub warmup_frac: f64,
    pub adamw: AdamWConfig,
    pub seed: u64,
    pub jitter: Option<Jitter>,
    pub target: FlowTarget,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 4,
            lr_max: 1e-4,
            warmup_frac: 0.1,
            adamw: AdamWConfig::default(),
            seed: 0,
            jitter: Some(Jitter::default()),
            target: FlowTarget::Continuous,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.steps == 0 || self.batch == 0 {
            return Err(ModelError::Config("steps and batch size must be positive".into()));
        }
        if !(self.lr_max.is_finite() && self.lr_max > 0.0) || !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(ModelError::Config(format!(
                "invalid schedule: lr_max {} warm-up fraction {}",
                self.lr_max, self.warmup_frac
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        onecycle_lr(step, self.steps, self.lr_max, self.warmup_frac).expect("step inside schedule")
    }

    pub fn peak_step(&self) -> usize {
        onecycle_peak_step(self.steps, self.warmup_frac)
    }
}

/// One training pair at network resolution.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub image: ImageRaster,
    pub flow: WarpFlow,
}

impl TrainSample {
    /// Resizes a pair to the network input, rescaling flow coordinates.
    pub fn fit(image: &ImageRaster, flow: &WarpFlow, cfg: &ModelConfig) -> Result<Self, ModelError> {
        let (h, w) = (cfg.height, cfg.width);
        if flow.height() != image.height() || flow.width() != image.width() {
            return Err(ModelError::Config(format!(
                "flow {}x{} does not cover image {}x{}",
                flow.height(),
                flow.width(),
                image.height(),
                image.width()
            )));
        }
        // flow grid and coordinates both scale with the image
        let net_flow = resize_flow(flow, h, w, h, w);
        Ok(Self {
            image: image.resize(h, w),
            flow: net_flow,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Trainer state persisted in checkpoint metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub train: TrainConfig,
    pub losses: Vec<StepLog>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub checkpoint_path: Option<PathBuf>,
    pub checkpoint_every: Option<usize>,
    /// Stop after this many steps of the schedule (for split runs).
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<StepLog>,
}

/// Sample indices of step `step`: an epoch-wise shuffled stream, seeded
/// per epoch so any step can be recomputed on resume.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for k in 0..batch {
        let pos = step * batch + k;
        let (epoch, offset) = (pos / n, pos % n);
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64, 0x5417)));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("permutation").1[offset]);
    }
    out
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients<T: Real>(
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    image: &ImageRaster,
    target: &WarpFlow,
) -> Result<(f64, Vec<Tensor<T>>), ModelError> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let x = g.constant(image_tensor(image));
    let out = model_forward(&mut g, cfg, &bound, x)?;
    let tgt = flow_tensor(target);
    let loss = g.l1_mean(out.flow, tgt)?;
    g.backward(loss)?;
    let value = g.value(loss).data()[0].to_f64_lossy();
    let grads = bound
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, grads))
}

/// `[H, W, 2]` tensor of a flow.
pub fn flow_tensor<T: Real>(flow: &WarpFlow) -> Tensor<T> {
    let data = flow.to_interleaved().into_iter().map(|v| T::from_f64_lossy(v as f64)).collect();
    Tensor::new(&[flow.height(), flow.width(), 2], data).expect("flow extents")
}

fn state_cast<A: Real, B: Real>(s: &AdamWState<A>) -> AdamWState<B> {
    AdamWState {
        step: s.step,
        moments: s
            .moments
            .iter()
            .map(|m| Moments {
                m: m.m.cast(),
                v: m.v.cast(),
            })
            .collect(),
    }
}

/// Trains from `init` (fresh parameters or a checkpoint to resume).
pub fn train(
    samples: &[TrainSample],
    init: Checkpoint,
    tc: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome, ModelError> {
    match tc.precision {
        Precision::F32 => train_impl::<f32>(samples, init, tc, opts),
        Precision::F64 => train_impl::<f64>(samples, init, tc, opts),
    }
}

fn train_impl<T: Real>(
    samples: &[TrainSample],
    init: Checkpoint,
    tc: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome, ModelError> {
    tc.validate()?;
    let cfg = init.config.clone();
    cfg.validate()?;
    if samples.is_empty() {
        return Err(ModelError::Config("training set is empty".into()));
    }
    for (i, s) in samples.iter().enumerate() {
        if (s.image.height(), s.image.width(), s.flow.height(), s.flow.width()) != (cfg.height, cfg.width, cfg.height, cfg.width) {
            return Err(ModelError::Config(format!(
                "sample {i} is not at the network size {}x{}",
                cfg.height, cfg.width
            )));
        }
    }
    let mut losses = Vec::new();
    if init.step > 0 {
        let meta: TrainMeta = serde_json::from_str(&init.meta)
            .map_err(|e| ModelError::Checkpoint(format!("resume metadata: {e}")))?;
        if &meta.train != tc {
            return Err(ModelError::Config(
                "resumed run must use the training configuration stored in the checkpoint".into(),
            ));
        }
        losses = meta.losses;
    }
    let mut params: ParamStore<T> = init.params.cast();
    let mut state: AdamWState<T> = match &init.optimizer {
        Some(s) => state_cast(s),
        None => AdamWState::new(params.tensors()),
    };
    let targets: Vec<WarpFlow> = samples
        .iter()
        .map(|s| match tc.target {
            FlowTarget::Continuous => s.flow.clone(),
            FlowTarget::Sentinel => apply_sentinel(&s.flow, cfg.height, cfg.width),
        })
        .collect();

    let start = init.step as usize;
    let end = opts.stop_after.map_or(tc.steps, |s| s.min(tc.steps));
    let snapshot = |params: &ParamStore<T>, state: &AdamWState<T>, step: usize, losses: &[StepLog]| Checkpoint {
        config: cfg.clone(),
        params: params.cast(),
        optimizer: Some(state_cast(state)),
        step: step as u64,
        meta: serde_json::to_string(&TrainMeta {
            train: tc.clone(),
            losses: losses.to_vec(),
        })
        .expect("metadata serializes"),
    };
    for step in start..end {
        let lr = tc.lr_at(step);
        let idx = batch_indices(samples.len(), tc.batch, tc.seed, step);
        let mut total: Option<Vec<Tensor<T>>> = None;
        let mut loss_sum = 0.0;
        for (slot, &i) in idx.iter().enumerate() {
            let image = match &tc.jitter {
                Some(j) => hsv_jitter(
                    &samples[i].image,
                    j.hue,
                    j.saturation,
                    j.value,
                    derive_seed(tc.seed, step as u64, slot as u64 + 1),
                ),
                None => samples[i].image.clone(),
            };
            let (loss, grads) = sample_gradients(&cfg, &params, &image, &targets[i]).map_err(|e| match e {
                ModelError::Autodiff(AutodiffError::NonFinite { op }) => ModelError::NonFiniteLoss {
                    step,
                    detail: format!("{op} produced a non-finite value"),
                },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    step,
                    detail: format!("loss {loss}"),
                });
            }
            loss_sum += loss;
            match &mut total {
                None => total = Some(grads),
                Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.accumulate(g)),
            }
        }
        let inv = T::one() / T::from_usize(idx.len()).expect("batch size");
        let grads: Vec<Tensor<T>> = total.expect("non-empty batch").iter().map(|g| g.map(|v| v * inv)).collect();
        adamw_step(params.tensors_mut(), &grads, &mut state, lr, &tc.adamw)?;
        if params.tensors().iter().any(|t| !t.is_finite()) {
            return Err(ModelError::NonFiniteLoss {
                step,
                detail: "parameters became non-finite after the update".into(),
            });
        }
        let entry = StepLog {
            step,
            lr,
            loss: loss_sum / idx.len() as f64,
        };
        log::info!("step {:>5}  lr {:.3e}  loss {:.5}", entry.step, entry.lr, entry.loss);
        losses.push(entry);
        if let (Some(path), Some(every)) = (&opts.checkpoint_path, opts.checkpoint_every) {
            if every > 0 && (step + 1) % every == 0 && step + 1 < end {
                snapshot(&params, &state, step + 1, &losses).save(path)?;
            }
        }
    }
    let checkpoint = snapshot(&params, &state, end, &losses);
    if let Some(path) = &opts.checkpoint_path {
        checkpoint.save(path)?;
    }
    Ok(TrainOutcome { checkpoint, losses })
}
