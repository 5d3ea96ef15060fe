//! Post-backbone pipeline for fine-grained ground-to-aerial localization.
//!
//! The crate covers everything downstream of the feature encoders:
//!
//! - [`geometry`]: BEV grids, height layers, panorama and aerial projections.
//! - [`surface`]: visible-surface selection by cumulative height confidence,
//!   height-wise feature fusion, and aerial pseudo-height indexing.
//! - [`refiner`]: patch similarity, local/global residual refinement with
//!   ratio gating, dustbin extension and row/column softmax normalization.
//! - [`pose`]: weighted Procrustes and translation-only pose recovery.
//! - [`losses`]: virtual-correspondence, symmetric InfoNCE and height losses.
//! - [`eval`]: ground-truth projection, match success ratios, pose statistics.
//! - [`synth`]: seeded synthetic scenes with exact ground truth.
//! - [`pipeline`]: the stages chained from feature volume to pose.
//! - [`tensor`]: the binary tensor file format shared by every stage.
//!
//! # Feature flags
//! - `parallel` (default): per-cell, per-row and batch loops run on rayon.
//!   Without it the same code runs sequentially and produces identical results.

pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod par;
pub mod pipeline;
pub mod pose;
pub mod refiner;
pub mod surface;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use geometry::{
    AerialMeta, BevGridSpec, CameraIntrinsics, Geometry, GeometryConfig, HeightLayerSpec, Pose3DoF,
};
pub use pose::{Correspondence, CorrespondenceSet, RigidTransform2};
pub use refiner::{RefinerConfig, RefinerParams, SimilarityMatrix};
pub use surface::{BevFeatureMap, ConfidenceVolume, FeatureVolume, SurfaceMap};
pub use tensor::Tensor;
