//! Pulmonary-embolism identification pipeline on synthetic CT phantoms:
//! a fine-tuned grayscale classifier, a one-stage anchor-grid detector,
//! IoU/AP/F1 evaluation and the classifier/detector fusion rule.

pub mod augment;
pub mod classifier;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod metrics;
pub mod phantom;
pub mod render;
pub mod seed;
pub mod selftest;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
