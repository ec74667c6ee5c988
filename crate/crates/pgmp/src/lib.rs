//! Multi-stage progressive human-motion prediction.
//!
//! A from-scratch implementation of a coarse-to-fine pose forecasting stack:
//! dense spatial/temporal graph convolutions with learnable adjacencies, an
//! Encoder-Copy-Decoder stage network, recursively smoothed intermediate
//! training targets, Adam training with hand-derived backward passes, and a
//! desk-scale experiment harness. No ML framework dependencies; gradients are
//! verified against finite differences.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sequence;
pub mod targets;
pub mod tensor;
pub(crate) mod wire;
pub mod training;

pub use error::{Error, ErrorClass, Result};
pub use sequence::MotionSequence;
pub use tensor::{Scalar, Tensor};
