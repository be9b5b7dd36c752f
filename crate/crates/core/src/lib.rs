//! Self-correcting latent navigation at desk scale.
//!
//! A goal-conditioned offline agent navigates a raycast world over a
//! topological map of its own experience, and when it can no longer place
//! itself on that map it imagines short latent futures and steers toward the
//! most familiar one.

pub mod affordance;
pub mod config;
pub mod data;
pub mod error;
pub mod nn;
pub mod novelty;
pub mod offline_rl;
pub mod par;
pub mod recovery;
pub mod representation;
pub mod runtime;
pub mod sim;
pub mod topo_map;
pub mod train;

pub use error::{Error, Result};
