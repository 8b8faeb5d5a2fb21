//! Inference-time scaling laboratory for continuous latent reasoning.
//!
//! A small frozen latent-reasoning backbone, a learnable Gaussian thought
//! sampler trained with group-relative policy optimization, heuristic
//! perturbation baselines, and sampling-quality diagnostics.
//!
//! The numeric core is generic over [`Real`]; the aliases below fix it to
//! `f64`, which is what the command-line harness uses.

pub mod backbone;
pub mod baselines;
pub mod checkpoint;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod mathkernel;
pub mod reward;
pub mod rng;
pub mod rollout;
pub mod sampler;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Vector = mathkernel::Vector<f64>;
pub type Matrix = mathkernel::Matrix<f64>;
pub type Backbone = backbone::Backbone<f64>;
pub type SamplerParams = sampler::SamplerParams<f64>;
pub type Trajectory = rollout::Trajectory<f64>;
pub type RolloutGroup = rollout::RolloutGroup<f64>;
pub type TrainState = trainer::TrainState<f64>;
