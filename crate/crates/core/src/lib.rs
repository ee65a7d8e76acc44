//! Desk-scale think-answer distillation with salient reasoning-prefix
//! masking.
//!
//! The numeric core (tensors, autodiff, the transformer, mask construction
//! and budget scheduling) is generic over the scalar type via [`num::Scalar`];
//! the training pipeline, corpus and analysis tooling run on `f64` (see the
//! aliases below), which keeps KL and gradient oracles precision-clean.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod masking;
pub mod model;
pub mod num;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod seq;
pub mod tensor;

pub use error::{CoreError, Result};

/// Concrete instantiations used by the desk pipeline.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Model64 = model::Model<f64>;
pub type Adam64 = optim::Adam<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
