//! Desk-scale laboratory for contrastive action-sequence representations and
//! hierarchical goal-conditioned control on tabular/gridworld MDPs.
//!
//! The crate is organized around the experiment pipeline:
//!
//! * [`mdp`] — tabular MDPs, k-step reachability balls, and a decision
//!   procedure for dynamics bisimilarity between local MDPs.
//! * [`env`] — the multi-room gridworld and continuous point-room
//!   environments, plus conversion to tabular form.
//! * [`data`] — offline trajectory generation, the on-disk dataset format,
//!   and segment sampling (goal offsets, striding, truncation).
//! * [`nn`] — a minimal f32 MLP engine: forward/backward, Adam, checkpoints.
//! * [`carl`] — paired state-goal / action-sequence encoders trained with a
//!   normalized InfoNCE loss, and the ablation variants.
//! * [`hrl`] — hierarchical offline RL (expectile value + AWR policies) with
//!   optional representation co-training.
//! * [`eval`] — rollout evaluation, transfer counting, embedding analysis,
//!   and the sweep driver.
//!
//! Everything is deterministic given a seed: all randomness flows from
//! explicitly seeded ChaCha generators, and checkpoints/reports are
//! byte-identical across reruns of the same configuration.

pub mod carl;
pub mod data;
pub mod env;
pub mod error;
pub mod eval;
pub mod hrl;
pub mod mdp;
pub mod nn;
pub mod util;

#[cfg(any(test, feature = "testkit"))]
pub mod testkit;

pub use error::{Error, Result};
