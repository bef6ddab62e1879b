//! Knowledge distillation from 3D voxel models to bird's-eye-view models
//! for LiDAR semantic segmentation, at desk scale.
//!
//! The crate covers the full training stack: cylindrical voxelization and
//! polar BEV pillar grids, sparse z-axis compression, voxel-to-pillar
//! distillation with cross-attention, height-weighted label-weight
//! distillation, segmentation losses (weighted cross-entropy,
//! Lovász-softmax), logit distillation, and a reproducible training loop
//! with toy teacher/student networks. Every differentiable component runs
//! on a small reverse-mode autodiff tape and is verified against central
//! finite differences.
//!
//! See the guide under `book/` for a narrative walkthrough; the
//! `bevdistill` binary exposes the pipeline as CLI subcommands.

pub mod compress;
pub mod config;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod gradsuite;
pub mod grid;
pub mod loss;
pub mod lwd;
pub mod metrics;
pub mod model;
pub mod pointcloud;
pub mod store;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vpd;

pub use error::{Error, Result};
pub use tensor::Tensor;
