//! CPU engine for reconstructing animatable, semantics-embedded avatars as
//! clouds of anisotropic 3D Gaussians.
//!
//! The pipeline optimizes a canonical Gaussian cloud against multi-view frames
//! of an articulated body: a non-rigid offset network and skeleton-driven
//! linear blend skinning deform the cloud into observation space, a sparse
//! voxel U-Net contributes topology-aware correction offsets, and a tile-based
//! differentiable rasterizer renders color, per-part semantics, and alpha.
//! Per-part labels for supervision come from an annotator that projects a
//! labeled body template and transfers labels to foreground masks.
//!
//! Everything runs on the CPU in `f64`. Data-parallel sections use rayon when
//! the `parallel` feature (default) is enabled and fall back to sequential
//! loops otherwise; both paths produce bit-identical results under ordered
//! reductions.

pub mod annotate;
pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod deform;
pub mod density;
pub mod error;
pub mod gaussian;
pub mod image_io;
pub mod knn;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod mlp;
pub mod parallel;
pub mod render;
pub mod sh;
pub mod template;
pub mod train;
pub mod unet;
pub mod voxel;

pub use error::{Error, Result};
