//! Unified full-reference and no-reference image quality assessment.
//!
//! A frozen convolutional backbone feeds a small transformer encoder whose
//! token features serve two heads: a structure/texture similarity score for
//! reference/distorted pairs and a five-level quality classifier for single
//! images.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod fr_metric;
pub mod image;
pub mod losses;
pub mod model;
pub mod nr_head;
pub mod optim;
pub(crate) mod params;
pub mod synthetic;
pub mod trainer;

pub use error::{IqaError, Result};
