//! Hierarchical prototypical networks for few-shot audio classification.
//!
//! Prototypes computed from an episode's support set are averaged up a class
//! tree into metaprototypes; a query is scored against every level, and the
//! per-level cross-entropies are combined with exponentially decaying weights.
//!
//! Module map:
//! - [`tree`]: class hierarchy, shortening, random leaf swaps, LCA queries.
//! - [`autodiff`]: fp64 reverse-mode tape, Adam, checkpoints.
//! - [`embedding`]: conv4 and MLP backbones.
//! - [`features`]: STFT, log-Mel, silence removal, segmentation, synthetic
//!   instruments, WAV ingestion and the feature cache.
//! - [`protonet`]: prototypes, metaprototypes, level distributions, losses.
//! - [`episodes`]: family-balanced splits and episode sampling.
//! - [`harness`]: training, evaluation, metrics, Wilcoxon test, ablations.

pub mod autodiff;
pub mod embedding;
pub mod episodes;
pub mod error;
pub mod features;
pub mod harness;
pub mod protonet;
pub mod tree;

pub use error::{Error, Result};
pub use tree::{ClassTree, NodeId};
