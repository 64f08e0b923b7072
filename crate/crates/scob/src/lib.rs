//! Semantic contrastive bootstrapping for single-positive multi-label
//! recognition, self-contained at desk scale.
//!
//! The crate trains a small convolutional backbone with masked-attention
//! transformers on synthetic multi-object scenes where each training image
//! carries exactly one confirmed positive label. Training alternates
//! between extracting class-activation masks from the previous model state
//! and optimizing the network, a label estimator, and an object-level
//! contrastive objective whose negatives come from per-class priority
//! heaps.
//!
//! See the `book/` directory for a guided tour; its code snippets compile
//! and run as doc-tests of this crate.

pub mod autodiff;
pub mod cam;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod eval;
pub mod export;
pub mod ipt;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod train;

pub use error::{Result, ScobError};
