//! Diffusion-augmented distributionally robust decision-focused learning.
//!
//! A workload predictor feeds a capacity-provisioning decision. Training
//! minimizes the decision loss under the worst distribution a fine-tuned
//! diffusion model can reach while its denoising score-matching loss stays
//! within a budget.

// `!(x > 0.0)` is how validation rejects NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod imax;
pub mod nn;
pub mod predictor;
pub mod provisioning;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
