//! Propaganda span identification and technique classification toolkit.
//!
//! The crate bundles a small transformer encoder with a linear-chain CRF for
//! span tagging, marker-token and Span CLS span classifiers, a re-weighted
//! multi-label BCE loss, naive self-training, probability-averaging
//! ensembles, partial-match span scoring and rank-test error analysis.

pub mod analysis;
pub mod cli;
pub mod crf;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod numcore;
pub mod pipeline;
pub mod spandata;
pub mod stats;

pub use error::{Error, Result};
