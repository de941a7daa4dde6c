//! Differentiable spatial-partitioning forests for segmentation masks.
//!
//! A mask is cut into fixed-size blocks; each block gets one small partition
//! tree per class subset (BSP with one of six signed-distance boundary
//! families, k-d threshold splits, or quadtrees). The renderer turns a
//! tree's inner-node parameters into a per-pixel region probability map,
//! blends leaf class logits through it, and is differentiable end to end,
//! so blocks can be fitted to target masks by gradient descent and rendered
//! back at any resolution.

pub mod data;
pub mod error;
pub mod fit;
pub mod forest;
pub mod grad;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod render;
pub mod sdf;

pub use error::{Error, Result};
