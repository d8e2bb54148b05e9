//! Document-image rectification with backward warping flows.
//!
//! The crate covers the whole pipeline: a small reverse-mode differentiation
//! engine ([`autodiff`]), the warping-flow data model ([`flow`]), synthetic
//! training data ([`synth`]), the hierarchical encoder/decoder flow network
//! ([`model`]) and the masked evaluation metrics ([`metrics`]).

pub mod autodiff;
pub mod flow;
pub mod image;
pub mod synth;
pub mod metrics;
pub mod model;
