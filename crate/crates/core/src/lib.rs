//! 4D semantic occupancy world model at desk scale.
//!
//! Given a short history of semantic occupancy grids, ego poses and
//! (optionally) camera images, the model forecasts future occupancy grids,
//! the ego trajectory and future images in a single non-autoregressive
//! forward pass. Future dynamic voxels are produced by warping current
//! features with a predicted flow field; static voxels ride along via ego
//! pose transport. Training can additionally supervise the predicted
//! volumes through differentiable depth rendering and photometric
//! reprojection consistency.
//!
//! Everything runs on the crate's own dense-tensor engine with reverse-mode
//! autodiff ([`tensor`]), in `f32` for training/inference and `f64` for
//! gradient checking. Inner loops parallelize with rayon when the `parallel`
//! feature is on; parallel and sequential schedules are bit-identical by
//! construction (see [`exec`]).

pub mod ckpt;
pub mod config;
pub mod error;
pub mod exec;
mod fileio;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod occ;
pub mod render;
pub mod real;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
