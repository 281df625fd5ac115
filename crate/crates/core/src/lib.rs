//! Online continual learning for symbolic Raven-style matrix puzzles.
//!
//! The crate generates seven families of symbolic analogical-reasoning
//! tasks, trains a small relation-scoring network on them under streaming
//! and incremental-batch protocols (with selective-replay, regularization
//! and replay baselines), and evaluates transfer with accuracy-matrix
//! metrics plus subset-based significance testing.

pub mod config;
pub mod continual;
pub mod metrics;
pub mod model;
pub mod replay;
pub mod taskgen;
