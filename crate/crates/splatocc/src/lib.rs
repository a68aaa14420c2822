//! Differentiable Gaussian-splatting toolkit for desk-scale synthetic
//! scenes: cross-view splatting for metric-scale self-supervised depth and
//! voxel-vertex splatting for fast occupancy rendering, with a ray-marched
//! volume renderer as the comparison baseline.

pub mod adam;
pub mod error;
pub mod gaussians;
pub mod geometry;
pub mod image;
pub mod io;
pub mod losses;
pub mod masks;
pub mod metrics;
pub mod pipeline;
pub mod scene;
pub mod splat;
pub mod volume;
pub mod voxel;

pub use error::{Error, Result};
