//! Decentralized multi-agent reinforcement learning with learned continuous
//! communication protocols, on three communication-essential gridworlds.
//!
//! The crate is self-contained: a small reverse-mode autodiff core drives
//! per-agent actor-critic training, messages are grounded with contrastive,
//! autoencoding, or differentiable-channel objectives, and an evaluation
//! suite measures protocol quality (symmetry, probing, cross-play).

pub mod agents;
pub mod comm;
pub mod envs;
pub mod eval;
pub mod numerics;
pub mod training;
