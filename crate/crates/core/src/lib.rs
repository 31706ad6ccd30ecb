//! Toy-scale monocular height estimation with a full interpretability stack:
//! synthetic scene generation, two small encoder-decoder height networks,
//! unit-level dissection (class/height selectivity and anomaly maps),
//! instance-level perturbation experiments, local integrated-gradients
//! attribution, and a disentangled latent head with unsupervised
//! segmentation.

pub mod attribute;
pub mod dissect;
pub mod dlt;
pub mod error;
pub mod io;
pub mod metrics;
pub mod perturb;
pub mod scenegen;
pub mod toymodel;

pub use error::{Error, Result};

/// Upsampled activation maps of a model's penultimate layer, (units, H, W).
pub type FeatureStack = ndarray::Array3<f32>;
