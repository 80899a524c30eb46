//! Deep contrastive multi-view clustering with semantics-guided instance pair
//! weights.
//!
//! Per-view autoencoders feed an adaptively weighted fusion view. Shared heads
//! map every view to cluster probabilities and to instance features; cluster
//! columns are contrasted across views, and instance pairs are contrasted with
//! negatives down-weighted by an attention matrix computed from the
//! concatenated cluster probabilities.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod kmeans;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod report;
mod seeding;
pub mod trainer;

pub use error::{Error, Result};
