//! Closed-loop interactive composed retrieval.
//!
//! A session starts from a reference item and a relative edit, then loops:
//! user feedback is decomposed into a standalone search query and an
//! anchor-relative edit, both retrieval channels run, a reflection step
//! decides whether the previously presented candidate must be demoted, and
//! the per-turn channel lists are fused with time-weighted reciprocal rank
//! fusion.
//!
//! The crate also ships the instruments used to evaluate that loop: a
//! target-conditioned user simulator, per-turn Recall@K / BRI metrics, a
//! synthetic benchmark generator and the ablation harness.

pub mod bench;
pub mod channels;
pub mod error;
pub mod fusion;
pub mod gallery;
pub mod intent;
pub mod memory;
pub mod metrics;
pub mod reasoner;
pub mod reflection;
pub mod runfile;
pub mod session;
pub mod simulator;
pub mod types;

pub use error::{Error, Result};
pub use gallery::{Gallery, Item, Schema};
pub use types::{
    Attributes, Channel, Constraint, EditInstruction, FeedbackAction, FeedbackMessage, Query,
    RankedEntry, RankedList,
};
