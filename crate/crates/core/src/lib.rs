//! attacklab: a desk-scale laboratory for stealthy adversarial attacks on
//! reinforcement-learning agents.
//!
//! The crate provides deterministic toy environments with scripted experts,
//! a small feedforward-network engine with exact input gradients, victim
//! policies trained by behavior cloning or REINFORCE, a learned dynamics
//! predictor, two attack schedulers (critical-point scanning and a learned
//! antagonist policy), targeted perturbation crafting (C&W-style and FGSM),
//! and an experiment harness with baseline attacks and sweep reporting.

pub mod error;
pub mod nn;

pub use error::{Error, Result};
