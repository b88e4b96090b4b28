//! Redaction of conditionals from conditional generative models.
//!
//! The crate contains a small reverse-mode tensor engine, conditioning
//! networks, exact label redaction for affine conditioners, distillation
//! based redaction for nonlinear ones, the evaluation metrics and a discrete
//! adversarial prompting attack.

pub mod attack;
pub mod closedform;
pub mod conditional;
pub mod error;
pub mod experiment;
pub mod jsonfmt;
pub mod metrics;
pub mod nn;
pub mod redistill;
pub mod rng;
pub mod tensor;
pub mod toy;

pub use conditional::Conditional;
pub use error::{Error, Result};
pub use tensor::Tensor;
