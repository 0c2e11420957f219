//! 3D face alignment by regressing morphable-model parameters with a dual
//! attention depthwise-dense network.
//!
//! Modules, bottom up:
//! - [`tensor`]: N-dimensional arrays with reverse-mode differentiation.
//! - [`morphable`]: the morphable face model, rotations and weak-perspective projection.
//! - [`losses`]: weighted parameter distance and vertex Wing objectives.
//! - [`network`]: SE / SGE attention, SGE-MobileBlocks, dense blocks and the regressor.
//! - [`augmentation`]: face cropping, profile rotation and virtual samples.
//! - [`evaluation`]: NME, CED curves, yaw-binned reports and complexity accounting.
//! - [`render`]: z-buffer rasterization and landmark overlays.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augmentation;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod losses;
pub mod morphable;
pub mod network;
pub mod render;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Float, Graph, ParamStore, Tensor, Var};
