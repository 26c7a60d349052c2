//! Statistics-guided model merging.
//!
//! Task-specific classifiers fine-tuned from one pretrained base are merged
//! by a learned, per-task (or per-task-per-layer) convex combination. The
//! coefficients come from a small MLP that reads each weight tensor's
//! mean, variance, magnitude and leading singular values, and is trained
//! against pseudo labels produced by each task's own model on unlabeled
//! validation inputs.

pub mod checkpoint;
pub mod cli;
pub mod distill;
pub mod error;
pub mod harness;
pub mod learner;
pub mod merge;
pub mod numerics;
pub mod stats;

pub use error::{Error, Result};
