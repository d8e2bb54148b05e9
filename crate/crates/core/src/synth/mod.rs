//! Synthetic training and evaluation pairs: flat document rendering,
//! analytic distortions, boundary-category crops and dataset assembly.

mod color;
mod crop;
mod dataset;
mod distort;
mod render;

pub use color::{hsv_jitter, hsv_to_rgb, rgb_to_hsv, shift_hsv};
pub use crop::{classify_crop, sample_crop, CropCategory, CROP_ATTEMPTS, CROP_MARGIN, CROP_SIDE_RANGE, MIN_PARTIAL_COVERAGE};
pub use dataset::{
    build_dataset, category_plan, derive_seed, generate_indexed, generate_sample, interior_agreement, load_dataset,
    max_flow_step, read_manifest, BuildOptions, CategoryMix, GeneratedSample, LoadedSample, ManifestRow, SampleRecord,
    CONSISTENCY_TOLERANCE, GENERATOR_VERSION, MANIFEST_FILE, MAX_FLOW_STEP, MAX_SAMPLE_ATTEMPTS,
};
pub use distort::{
    generate_distortion, homography_from_points, Axis, DistortionParams, Distorted, Sinusoid, IDENTITY_HOMOGRAPHY,
    MAX_AMPLITUDE_FRACTION, MAX_NONCONVERGED_FRACTION, MAX_SINUSOIDS, NEWTON_MAX_ITERS, NEWTON_TOLERANCE,
};
pub use render::{
    gaussian_blur, render_document, render_document_with, ElementKind, LayoutElement, PixelRect, RenderConfig,
    RenderedDocument, BACKGROUND_STYLES,
};

use thiserror::Error;

use crate::flow::FlowError;
use crate::image::ImageError;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("inversion failed to converge on {failed} of {total} pixels")]
    NonConvergent { failed: usize, total: usize },
    #[error("no {category} crop found in {attempts} attempts")]
    InfeasibleCrop { category: CropCategory, attempts: usize },
    #[error("crop flow disagrees with the full flow (mean gap {gap:.4})")]
    Inconsistent { gap: f64 },
    #[error("flow jumps by {step:.2} px between neighbours")]
    Discontinuous { step: f32 },
    #[error("sample {index}: gave up after {attempts} attempts ({last})")]
    Exhausted { index: u64, attempts: u64, last: String },
    #[error("invalid category mix: {0}")]
    InvalidMix(String),
    #[error("{0} already exists (pass --force to overwrite)")]
    Exists(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Manifest { path: String, line: usize, reason: String },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

impl SynthError {
    /// Whether a fresh sub-seed could succeed where this attempt failed.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            SynthError::NonConvergent { .. }
                | SynthError::InfeasibleCrop { .. }
                | SynthError::Inconsistent { .. }
                | SynthError::Discontinuous { .. }
                | SynthError::Flow(FlowError::EmptyPreimage(_))
        )
    }
}
