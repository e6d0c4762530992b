//! Patch-based multi-scale CNN segmentation of white matter hyperintensities
//! with explicit spatial-location feature injection.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`gemm`], [`rng`]: dense numerics and counter-keyed random
//!   streams with a strict bitwise-reproducibility contract;
//! - [`engine`]: the differentiable building blocks (convolution, fully
//!   connected layers, ReLU, dropout, softmax cross-entropy, Glorot
//!   initialization, RMSPROP, gradient checking);
//! - [`volume`], [`locfeat`], [`sampler`]: cohort I/O, spatial-location
//!   feature computation, and multi-scale patch sampling;
//! - [`arch`], [`trainer`], [`inference`]: the four fusion architectures,
//!   the training loop, and whole-volume segmentation;
//! - [`eval`], [`synth`]: evaluation metrics/statistics and the synthetic
//!   cohort generator used by the test suite.

pub mod arch;
pub mod engine;
pub mod error;
pub mod eval;
pub mod gemm;
pub mod inference;
pub mod locfeat;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
