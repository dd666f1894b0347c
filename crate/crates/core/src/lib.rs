//! Teacher-student training for patch classifiers learned from partially
//! labeled whole-slide images.
//!
//! The crate is organised as a pipeline:
//!
//! - [`slidegen`] synthesises slides with planted lesions, drops lesions from
//!   the annotation to create noisy patch labels, and extracts patches.
//! - [`geometry`] partitions same-slide patches into spatially similar and
//!   dissimilar sets and samples positive/negative pairs.
//! - [`backbone`] is a small from-scratch conv net (or MLP) with analytic
//!   gradients, Adam, and a step learning-rate schedule.
//! - [`augment`] holds the stochastic photometric and geometric augmentations.
//! - [`losses`] implements cross entropy, the temperature-scaled similarity
//!   loss and the embedding consistency loss.
//! - [`ensemble`] keeps teacher weight EMA, per-patch prediction EMA and the
//!   neighbour-consensus pseudo labels.
//! - [`trainer`] runs the self-similarity student loop and the baseline
//!   teacher-student variants.
//! - [`eval`] stitches patch predictions into slide masks and scores them
//!   with patch-level DSC and lesion-level FROC.
//! - [`dataset`], [`config`] and [`experiment`] provide the on-disk formats
//!   and the experiment driver used by the `simstudent` binary.

pub mod augment;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod labeling;
pub mod losses;
pub mod rng;
pub mod slidegen;
pub mod trainer;

pub use error::{Error, Result};

/// Side length of a patch raster in pixels.
pub const PATCH_SIZE: usize = 32;
/// Colour channels per pixel.
pub const CHANNELS: usize = 3;
/// Number of values in one patch raster (row, col, channel).
pub const PATCH_LEN: usize = PATCH_SIZE * PATCH_SIZE * CHANNELS;
/// Number of classes (benign, cancer).
pub const NUM_CLASSES: usize = 2;
