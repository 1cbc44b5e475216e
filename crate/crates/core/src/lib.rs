//! Nearly-nested image datasets for dimension-invariance studies in spatial
//! steganalysis.
//!
//! The crate builds families of fixed-size datasets cropped from a common
//! set of mother images so that every dataset shares the same cost
//! distribution ("same difficulty"), and calibrates a relative payload per
//! dimension so that a fixed detector reaches the same accuracy ("same
//! security").
//!
//! Module map:
//!
//! - [`cost_model`]: S-UNIWARD style additive costs from db8 wavelet residuals.
//! - [`histogram`]: binned cost distributions and the symmetrized KL distance.
//! - [`integral_histogram`]: per-bin prefix sums for O(bins) rectangle queries.
//! - [`smart_crop`]: exhaustive crop search minimizing the KL distance to the mother.
//! - [`embedding`]: square-root-law payloads and the payload-limited ternary simulator.
//! - [`calibration`]: dichotomous payload search against a pluggable detector.
//! - [`dilated_conv`]: dilated 2D convolution and the 10/10/10 inception block.
//! - [`dataset`]: UNI/MULTI dataset construction and manifests.

pub mod calibration;
pub mod cost_model;
pub mod dataset;
pub mod dilated_conv;
pub mod embedding;
mod error;
pub mod histogram;
pub mod image;
pub mod integral_histogram;
mod par;
pub mod rawmap;
pub mod rng;
pub mod smart_crop;
pub mod synth;

pub use crate::error::{Error, Result};
pub use crate::image::GrayImage;
