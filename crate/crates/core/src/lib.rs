//! Multi-objective loss weighting for segmentation-style object detection.
//!
//! The crate bundles a small reverse-mode autodiff engine, the detection
//! losses (soft IoU, centroid distance, cross entropy, pickup error), the
//! variance-based and learned loss weightings, a desk-scale hourglass
//! network with its training loop, a synthetic RGBD scene generator, and
//! the convergence and significance analysis used to compare methods.

pub mod analysis;
pub mod auxnet;
pub mod autodiff;
pub mod config;
pub mod curve;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod optim;
pub mod sweep;
pub mod tensor;
pub mod train;
pub mod weighting;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Added to every loss denominator (IoU union, centroid mass).
pub const EPS_DEN: f64 = 1e-8;
