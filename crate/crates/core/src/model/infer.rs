//! Inference at native resolution.

use super::checkpoint::Checkpoint;
use super::config::ModelConfig;
use super::network::{image_tensor, model_forward};
use super::params::ParamStore;
use super::ModelError;
use crate::autodiff::{Graph, Real};
use crate::flow::{resize_flow, warp, ValidityMask, WarpFlow};
use crate::image::ImageRaster;

/// Network prediction for an image already at the configured input size.
pub fn predict_flow<T: Real>(cfg: &ModelConfig, params: &ParamStore<T>, image: &ImageRaster) -> Result<WarpFlow, ModelError> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(image_tensor(image));
    let out = model_forward(&mut g, cfg, &bound, x)?;
    let data: Vec<f32> = g.value(out.flow).data().iter().map(|v| v.to_f64_lossy() as f32).collect();
    Ok(WarpFlow::from_interleaved(cfg.height, cfg.width, &data)?)
}

#[derive(Clone, Debug)]
pub struct Rectified {
    pub image: ImageRaster,
    /// Flow at native resolution, addressing the native input.
    pub flow: WarpFlow,
    pub mask: ValidityMask,
}

/// Resizes `image` to the network input, predicts a flow, scales it back to
/// the native extents and unwarps the original image (fill 0).
pub fn rectify(image: &ImageRaster, ckpt: &Checkpoint) -> Result<Rectified, ModelError> {
    rectify_with::<f32>(image, &ckpt.config, &ckpt.params.cast())
}

pub fn rectify_with<T: Real>(image: &ImageRaster, cfg: &ModelConfig, params: &ParamStore<T>) -> Result<Rectified, ModelError> {
    let net_in = image.to_rgb().resize(cfg.height, cfg.width);
    let net_flow = predict_flow(cfg, params, &net_in)?;
    let (h, w) = (image.height(), image.width());
    let flow = resize_flow(&net_flow, h, w, h, w);
    let (out, mask) = warp(image, &flow, 0.0);
    Ok(Rectified { image: out, flow, mask })
}
