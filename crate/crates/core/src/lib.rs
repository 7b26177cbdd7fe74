//! Focal-diversity ensemble pruning and two-agent reinforcement-learning fusion.
//!
//! A pool of N answer-producing models is pruned by a *decider* policy that
//! reads diversity features (focal diversity, Fleiss kappa) computed over a
//! sliding window of per-model failures, and the selected models' choice
//! probabilities are fused into a final answer by an *aggregator* policy.
//! Both policies are small sigmoid MLPs trained with REINFORCE or clipped
//! PPO, first offline (warm start) and then online every few queries.
//!
//! The crate is `no_std`-compatible (`alloc` required); file formats, the
//! CLI, and the HTTP harvesting client live in the companion `marl-focal`
//! crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod diversity;
pub mod engine;
pub mod eval;
pub mod policy;
pub mod rl;

mod error;
mod math;

pub use error::Error;

pub type Result<T> = core::result::Result<T, Error>;
