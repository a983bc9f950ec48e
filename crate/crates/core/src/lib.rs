//! Entropy-regularized RL fine-tuning and guidance for diffusion models.
//!
//! The crate is a desk-scale laboratory: every algorithm runs on low-dimensional
//! problems where the KL-tilted target `exp(r/α)·p_pre / Z`, the soft value
//! functions and the soft-optimal policies can be computed exactly, so each
//! method can be checked against an independent ground truth.
//!
//! Module map:
//!
//! - [`tensor`]: dense arrays, a reverse-mode compute graph, MLPs, Adam, checkpoints.
//! - [`diffusion`]: VP schedule, Gaussian-mixture bases, pre-trained and
//!   fine-tunable reverse policies, trajectory sampling.
//! - [`rewards`]: analytic, black-box, classifier and regressed rewards.
//! - [`oracle`]: Gaussian tilt, exact grid soft dynamic program, MALA.
//! - [`finetune`]: soft PPO, reward backpropagation, reward-weighted MLE, PCL.
//! - [`guidance`]: value-weighted sampling and its value-gradient estimators.
//! - [`harness`]: run configs, metrics, persistence and plot data.

pub mod diffusion;
pub mod error;
pub mod finetune;
pub mod guidance;
pub mod harness;
pub mod oracle;
pub mod rewards;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
