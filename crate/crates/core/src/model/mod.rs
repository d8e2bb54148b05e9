//! The rectification network: a convolutional backbone, a hierarchical
//! transformer encoder, a query-based decoder and a convex-upsampling flow
//! head, with training and inference drivers.

mod checkpoint;
mod config;
mod infer;
mod network;
mod params;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, PositionalKind, QueryMode, UpsampleMode, BACKBONE_STRIDE, PYRAMID_STRIDE, UPSAMPLE_FACTOR};
pub use infer::{predict_flow, rectify, rectify_with, Rectified};
pub use network::{
    backbone_forward, coarse_identity, decoder_forward, decoder_queries, encoder_forward, flow_head, image_tensor,
    model_forward, positional_embedding, residual_block, Decoded, FeaturePyramid, ForwardOutput, HeadOutput,
};
pub use params::{param_specs, upsample_logits, Bound, Init, ParamSpec, ParamStore};
pub use train::{
    batch_indices, flow_tensor, sample_gradients, train, FlowTarget, Jitter, Precision, StepLog, TrainConfig,
    TrainMeta, TrainOptions, TrainOutcome, TrainSample,
};

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::flow::FlowError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint format version {found} is not supported (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}
