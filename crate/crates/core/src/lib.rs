//! Semi-supervised joint classification, lesion segmentation and explanation
//! with calibrated pseudo-labels.
//!
//! A VGG-style encoder with class-score heads at three scales feeds both a
//! classifier and a U-shaped decoder. Unlabelled images are trained against
//! pseudo-labels fused from a refined class-agnostic activation map, an
//! integrated-gradients saliency map and the decoder's own prediction.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod io;
pub mod model;
pub mod explain;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod seeds;
pub mod synthdata;
pub mod trainer;
