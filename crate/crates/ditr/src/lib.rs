//! Multi-modality 2D image registration toolkit.
//!
//! Provides classical information-theoretic similarity metrics (joint entropy,
//! mutual information, categorical maximum likelihood on a binned joint
//! histogram) and a learned patch-classifier metric trained by iterated
//! maximum likelihood, together with the derivative-free optimization and
//! synthetic-data machinery needed to run registration experiments end to end.

pub mod classifier;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod histogram;
pub mod image;
pub mod iml;
pub mod optimizer;
pub mod sampling;
pub mod synth;
pub mod transform;

pub use error::{Error, Result};
pub use image::Image;
pub use transform::{Point, TransformParams};
