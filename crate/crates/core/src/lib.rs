//! Multi-view 3D object detection driven by 2D detections.
//!
//! Per-view 2D boxes are lifted to 3D reference points through per-RoI
//! equivalent intrinsics, associated across views by projecting each box's
//! viewing frustum, and refined by a transformer decoder whose
//! cross-attention only sees each query's relevant regions. A synthetic
//! multi-camera simulator provides scenes, detections, features and metrics.

pub mod association;
pub mod autodiff;
pub mod decoder;
pub mod error;
pub mod geometry;
pub mod matching_loss;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod query_gen;
pub mod simulator;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
