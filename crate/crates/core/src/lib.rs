//! Multi-view stereo depth engine.
//!
//! Given a set of posed RGB images, the engine predicts a depth map per
//! frame and fuses them into a single point cloud:
//!
//! 1. per-image feature extraction at two scales ([`features`]),
//! 2. initial coarse depth from a plane-sweep variance cost volume with
//!    soft-argmin regression ([`costvolume`]),
//! 3. a volumetric scene encoding built from the feature-augmented point
//!    cloud of all current depth maps ([`scenemodel`]),
//! 4. iterative per-pixel depth residual refinement against that encoding,
//!    run in a nested outer/inner loop ([`pointflow`]),
//! 5. guided coarse-to-fine upsampling to full resolution ([`upsample`]),
//! 6. multi-view consistency fusion ([`fusion`]) and evaluation
//!    ([`evalmetrics`]).
//!
//! All learned blocks run on a small built-in differentiable-kernel
//! substrate ([`diffkern`]); [`synthdata`] provides deterministic synthetic
//! scenes with analytic ground truth for training and verification, and
//! [`pipeline`] wires everything into a CLI-facing API.

pub mod costvolume;
pub mod diffkern;
pub mod error;
pub mod evalmetrics;
pub mod features;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod parallel;
pub mod pipeline;
pub mod pointflow;
pub mod rng;
pub mod scenemodel;
pub mod synthdata;
pub mod upsample;

pub use error::{Error, Result};
