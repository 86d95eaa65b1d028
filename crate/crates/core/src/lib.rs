//! Two-stage arbitrary-shape text detector.
//!
//! Stage one segments text regions on a backbone feature map refined by
//! grouped spatial and channel attention ([`attention`]). Stage two pools
//! each proposal with a per-point affine warp ([`roi`]) and regresses six
//! geometry maps from which character-level fiducial points and the final
//! polygon are recovered ([`fox`]).

pub mod ablation;
pub mod attention;
pub mod autograd;
pub mod config;
pub mod error;
pub mod eval;
pub mod fox;
pub mod geometry;
pub mod losses;
pub mod nn;
pub mod npy;
pub mod params;
pub mod pipeline;
pub mod raster;
pub mod roi;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, Tensor};
