//! Discrete codebook world model with MPPI decision-time planning.
//!
//! Latent states are codes from a finite-scalar-quantization codebook. A
//! categorical dynamics model is trained by cross-entropy through
//! straight-through Gumbel-softmax rollouts, a TD3-style actor-critic with a
//! critic ensemble learns in the latent space, and a modified MPPI planner
//! acts by rolling expected codes through the model.
//!
//! All numerics are generic over [`Scalar`]; [`f32`] is used for training
//! and [`f64`] for gradient checks. The `*32`/`*64` aliases below fix the
//! precision for the common types.

pub mod agent;
pub mod envs;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod planner;
pub mod quantizer;
pub mod scalar;
pub mod worldmodel;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix32 = numerics::Matrix<f32>;
pub type Matrix64 = numerics::Matrix<f64>;
pub type Mlp32 = numerics::Mlp<f32>;
pub type Mlp64 = numerics::Mlp<f64>;
pub type Codebook32 = quantizer::Codebook<f32>;
pub type Codebook64 = quantizer::Codebook<f64>;
pub type WorldModel32 = worldmodel::WorldModel<f32>;
pub type WorldModel64 = worldmodel::WorldModel<f64>;
pub type Agent32 = agent::Agent<f32>;
pub type Agent64 = agent::Agent<f64>;
