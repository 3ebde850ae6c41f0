//! Learned selective labeling.
//!
//! A recurrent selector picks which `K` items of an unlabeled pool to send
//! for labeling; a prototype cosine predictor fit on those labels is scored
//! by AUROC on a held-out query set, and that score trains the selector by
//! REINFORCE against a random-selection baseline.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod predictor;
pub mod selectors;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};

/// Version string embedded in every artifact.
pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
