//! Probe-filtered GRPO on ModChain, a synthetic reasoning environment.
//!
//! A small softmax policy is behavior-cloned on demonstrations that keep
//! elaborating after the answer is already fixed ("reasoning theater"). A gated
//! attention probe is trained on the frozen pre-RL policy's hidden activations
//! to recognise post-commitment steps, and GRPO is run with a filter that
//! zeroes the reward and advantage of any rollout the probe flags.
//!
//! Module map:
//! - [`core`]: shared domain types and the deterministic RNG contract
//! - [`synthenv`]: task generation, transitions, verifier, forced answers, demos
//! - [`policy`]: the two-hidden-layer policy, sampling, gradients, behavior cloning
//! - [`probe`]: the frozen-base attention probe, its training, student probe, steering
//! - [`labeling`]: commitment points and the faithfulness metrics built on them
//! - [`trainer`]: the filtered GRPO loop, length-penalty baseline, adaptive threshold, audit
//! - [`stats`]: Wilson/bootstrap intervals, AUROC, Spearman, tercile and decile reports
//! - [`cli`]: configuration, persistence formats and the experiment pipeline

pub mod cli;
pub mod core;
pub mod error;
pub mod labeling;
pub mod policy;
pub mod probe;
pub mod stats;
pub mod synthenv;
pub mod trainer;

pub use crate::core::{derive_stream, Action, EnvState, RngStream, Rollout, Task};
pub use crate::error::{Error, Result};
