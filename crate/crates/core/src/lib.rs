//! Coordinate-free GUI grounding at desk scale.
//!
//! Attention over image patches is supervised with size-adaptive Gaussian
//! patch labels (integrated per patch and KL-matched) and a suppression term
//! that penalises attention mass on patches disjoint from the target box.
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! corpus, training and evaluation pipeline runs in `f64` through the
//! aliases below.

pub mod error;
pub mod eval;
pub mod geometry;
pub mod head;
pub mod ingest;
pub mod labels;
pub mod losses;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod trainer;
pub mod heatmap;

pub use error::{Error, Result};
pub use geometry::{bbox_center, intersects, iou, PatchGrid};
pub use scalar::Scalar;

pub type BoundingBox = geometry::BoundingBox<f64>;
pub type BoundingBoxF32 = geometry::BoundingBox<f32>;
pub type Point = geometry::Point<f64>;
pub type PointF32 = geometry::Point<f32>;
pub type LabelMap = labels::LabelMap<f64>;
pub type LabelMapF32 = labels::LabelMap<f32>;
pub type GaussianSpec = labels::GaussianSpec<f64>;
pub type AttentionMap = head::AttentionMap<f64>;
pub type AttentionMapF32 = head::AttentionMap<f32>;
pub type HeadParameters = head::HeadParameters<f64>;
pub type HeadParametersF32 = head::HeadParameters<f32>;
pub type PatchFeatures = head::PatchFeatures<f64>;
pub type QueryEmbedding = head::QueryEmbedding<f64>;
pub type LossBreakdown = losses::LossBreakdown<f64>;
