//! Group-relative policy optimization over hybrid trajectories.
//!
//! A trajectory couples a discrete reasoning sequence sampled by an
//! autoregressive head with a continuous flow-matching generation path
//! conditioned on it. Rewards come from decomposing each request into atomic
//! verifiable questions, scoring every question by a Yes/No confidence, and
//! aggregating the semantic and quality means geometrically.
//!
//! Everything runs on a small synthetic world ([`envtoy`]) where latents are
//! low-dimensional points and each attribute of a request is a region with an
//! analytic margin, so every quantity in the pipeline has a closed-form check.

pub mod arpolicy;
pub mod config;
pub mod dvreward;
pub mod envtoy;
pub mod flowpolicy;
pub mod gradcore;
pub mod grpotrain;
pub mod model;
pub mod rewardserve;
pub mod rng;

pub use envtoy::{AttributePredicate, PromptSpec, Tier};

pub use gradcore::ParamVector;
