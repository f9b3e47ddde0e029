//! Slow-fast context management for an embodied navigation agent.
//!
//! A toy causal decoder with an explicit KV cache, a sliding dialogue window
//! whose observation states are offloaded into memory, voxel-based token
//! pruning of that memory, a grid-world simulator with depth rendering and an
//! expert, and the standard navigation metrics.

pub mod commands;
pub mod config;
pub mod context;
pub mod decoder;
pub mod episode;
pub mod geometry;
pub mod metrics;
pub mod pruner;
pub mod tokenspace;
pub mod worldsim;
