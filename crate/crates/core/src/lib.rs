//! Few-shot preference-based reinforcement learning: meta-learned reward
//! ensembles adapted online from pairwise feedback, driving a SAC policy.

pub mod behavior;
pub mod config;
pub mod env;
pub mod error;
pub mod export;
pub mod meta;
pub mod numerics;
pub mod orchestrator;
pub mod preference;
pub mod reward;
pub mod sac;
pub mod selection;

pub use error::{Error, Result};
