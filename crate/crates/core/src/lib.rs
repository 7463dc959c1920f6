//! Obstacle detection for unmanned surface vehicles by semantic segmentation.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), the
//! segmentation network with IMU horizon fusion ([`net`], [`horizon`]), its
//! training objective ([`losses`]) and optimizer ([`train`]), the conversion
//! of segmentation masks into water edges and obstacle detections
//! ([`postprocess`]), the evaluation protocol ([`metrics`]), and a procedural
//! marine-scene generator with an on-disk dataset format ([`scene`],
//! [`dataset`], [`augment`]).

pub mod augment;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod horizon;
pub mod infer;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod overlay;
pub mod postprocess;
pub mod predictions;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
