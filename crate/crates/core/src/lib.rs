//! Sparse feature matching with parallel self/cross attention.
//!
//! The crate covers the whole pipeline at desk scale: a small reverse-mode
//! autodiff [`tape`], the wave position encoder, parallel and serial
//! attention layers, the point-set encoder–decoder with attentional pooling,
//! the Sinkhorn matching head, synthetic homography pairs, metrics, an
//! analytic FLOPs model and a trainer.

pub mod attention;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod flops;
pub mod gradcheck;
pub mod kernels;
pub mod keypoints;
pub mod matcher;
pub mod model;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod unet;
pub mod wave_pe;

pub use error::{Error, Result};
pub use keypoints::KeypointSet;
pub use matcher::{Assignment, Correspondences, Match, MatchSet};
pub use model::{Model, ModelConfig, PositionEncoding, Variant};
pub use params::ParamStore;
pub use tape::{Axis, Tape, Var};
pub use tensor::Tensor;
