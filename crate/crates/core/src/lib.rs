//! Reflection-aware neural implicit surface reconstruction.
//!
//! The crate trains an SDF + radiance field from posed multi-view images,
//! down-weighting reflective pixels with an explicit multi-view Mahalanobis
//! reflection score gated by mesh-based visibility, and evaluates the
//! recovered geometry against ground truth.

pub mod bvh;
pub mod field;
pub mod linalg;
pub mod math;
pub mod mesh;
pub mod metrics;
pub mod render;
pub mod rng;
pub mod scene;
pub mod score;
pub mod synth;
pub mod train;
pub mod visibility;

pub use math::{vec3, Mat3, Real, Vec3};
pub use scene::{CameraModel, ImageBuffer, SceneDataset, SceneError, ViewFrame};
