//! Progressive layer-dropping LoRA training on small fully connected
//! networks, with the analysis tooling around it: adapter merging
//! (fusion, mixture, Procrustes alignment), linear-mode-connectivity sweeps,
//! layerwise Shapley values and pruning.
//!
//! Everything is `f64`, single-threaded per run, and deterministic given its
//! seeds.

// `!(x > 0.0)` style checks are used deliberately so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod connect;
pub mod data;
pub mod error;
pub mod merge;
pub mod model;
pub mod ndcore;
pub mod prune;
pub mod schedule;
pub mod shapley;
pub mod train;

pub use error::{Error, Result};
pub use model::{AdapterSet, BaseNet, LayerMask, LoraAdapter};
pub use ndcore::Matrix;
