//! Segmentation of thin fibers from inaccurate labels.
//!
//! A small U-net is trained with cross entropy plus a local pairwise term
//! that rewards confident, label-consistent predictions among
//! intensity-similar neighbours. The crate ships its own reverse-mode
//! autodiff, a synthetic data generator, metrics and a Wilcoxon test.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod eval;
pub mod image;
pub mod metrics;
pub mod pgm;
pub mod seed;
pub mod spatial_loss;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod unet;
pub mod wilcoxon;

pub use error::{Error, Result};
