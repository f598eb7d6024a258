//! Multi-label zero-shot image tagging.
//!
//! Token features of an image are mapped to a group of `M` semantic vectors
//! in a label-embedding space. Two branches produce the group: learnable
//! group prompts that aggregate and then cross-attend over the tokens, and
//! `M` global pooling heads with per-channel learned token weights. Labels,
//! including ones never seen in training, are ranked by their best dot
//! product with any vector of the group.
//!
//! Module map:
//! - [`tensor`]: f64 tensors and reverse-mode autodiff
//! - [`embedding`]: label vocabulary, seen/unseen split, scoring
//! - [`model`]: network parameters and forward pass
//! - [`objective`]: pairwise ranking loss, diversity weight, regularizer
//! - [`metrics`]: mAP and top-K precision/recall/F1
//! - [`datagen`]: synthetic corpora and feature files
//! - [`trainer`]: Adam, schedule, training loop, checkpoints

pub mod datagen;
pub mod embedding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
