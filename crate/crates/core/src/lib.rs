//! Watermarking classifiers through the decision-boundary quirks that a
//! training seed leaves behind.
//!
//! A protected model's misclassifications are idiosyncratic to its seed, and
//! models extracted from it inherit them. This crate trains seeded dense
//! networks on synthetic data, simulates extraction and blurring attacks,
//! turns the inherited behaviour into a watermark key-set with per-watermark
//! verification classifiers, and evaluates detection with ROC analysis.
//!
//! Module map:
//!
//! - [`nnet`]: dense networks, training, exact gradients, artifacts
//! - [`data`]: synthetic datasets, splits and query sampling
//! - [`attacks`]: model extraction and blurring
//! - [`adversarial`]: the basic iterative method (BIM)
//! - [`boundary`]: disagreement, unique and transferable subsets
//! - [`watermark`]: key-set generation, verifier fitting and verification
//! - [`harness`]: evaluation runs, ROC metrics and CSV reports

pub mod adversarial;
pub mod artifact;
pub mod attacks;
pub mod boundary;
pub mod data;
mod error;
pub mod harness;
pub mod nnet;
pub mod rng;
pub mod watermark;

pub use error::{Error, Result};
