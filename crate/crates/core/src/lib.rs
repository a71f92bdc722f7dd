//! Desk-scale continual learning with two-phase bidirectional regularization.
//!
//! The crate trains small MLPs on class-incremental task streams under four
//! host strategies (distillation, memory replay, parameter regularization,
//! dynamic architecture expansion), either plainly (`CL`) or with the
//! two-phase flashback protocol (`FL`): a short rapid-acquisition phase that
//! distills plastic knowledge from the new task, a reset to the stable model,
//! and a second phase regularized from both knowledge bases at once. A theory
//! suite numerically certifies the gradient-decomposition identities behind
//! the protocol, and a metrics harness scores stability/plasticity.

pub mod autodiff;
pub mod checkpoint;
mod linalg;
pub mod config;
pub mod error;
pub mod experiment;
pub mod hosts;
pub mod knowledge;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rngutil;
pub mod tasks;
pub mod tensor;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
