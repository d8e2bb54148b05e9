//! Evaluation protocol: multi-scale SSIM with and without black-region
//! masking, local distortion over a dense correspondence field, and
//! character-level edit distance / error rate.

mod gray;
mod matching;
mod report;
mod ssim;
mod text;

pub use gray::GrayImage;
pub use matching::{dense_match, dense_match_with, local_distortion, local_distortion_masked, DisplacementField, MatchConfig};
pub use report::{
    evaluate_pair, evaluate_set, format_aggregate, EvalPair, MetricCounts, MetricMeans, MetricReport, MetricRow,
    TextPair,
};
pub use ssim::{
    apply_mask, black_region_mask, msssim, msssim_masked, msssim_pair, msssim_weights, protocol_resize, ssim,
    SsimStats, FILL_THRESHOLD, MSSSIM_LEVELS, MSSSIM_MIN_SIDE, MSSSIM_WEIGHTS, PROTOCOL_AREA,
};
pub use text::{cer, edit_distance, EditCounts};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("extent mismatch: {left_h}x{left_w} vs {right_h}x{right_w}")]
    ExtentMismatch {
        left_h: usize,
        left_w: usize,
        right_h: usize,
        right_w: usize,
    },
    #[error("image {height}x{width} is too small for {levels} scales (short side must be at least {min})")]
    TooSmall {
        height: usize,
        width: usize,
        levels: usize,
        min: usize,
    },
    #[error("no valid matches to average over")]
    NoValidMatches,
    #[error("reference text is empty; the error rate is undefined")]
    EmptyReference,
    #[error("evaluation set is empty")]
    EmptySet,
    #[error("{0}")]
    Report(String),
}

#[cfg(test)]
mod tests;
