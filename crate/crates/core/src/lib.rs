//! Simulation of human response times under time-pressure stimuli.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`reasoner`]: a recurrent network learns to solve the modular-arithmetic
//!    task from [`taskgen`] and exposes its hidden state as question features.
//! 2. [`transfer`]: kernel machines map those features to a baseline human
//!    choice, its probability and a baseline response time.
//! 3. [`ddm`]: the baseline becomes a deterministic evidence-accumulation
//!    trajectory.
//! 4. [`envs`] + [`ppo`]: a policy watches the [`stimuli`] frame by frame and
//!    biases the accumulator, yielding the final response-time estimate.
//!
//! [`controller`] implements the rule-based adaptive pressure strategy used
//! by live sessions and by the synthetic data generator in [`data`].

pub mod checkpoint;
pub mod config;
pub mod controller;
pub mod data;
pub mod ddm;
pub mod envs;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod ppo;
pub mod reasoner;
pub mod scalar;
pub mod stimuli;
pub mod taskgen;
pub mod transfer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Evidence trajectory in double precision.
pub type EvidenceTrajectory = ddm::EvidenceTrajectory<f64>;
/// Reasoner in single precision, the training default.
pub type ReasonerModel = reasoner::ReasonerModel<f32>;
/// Actor-critic policy in single precision.
pub type PolicyNetwork = ppo::PolicyNetwork<f32>;
