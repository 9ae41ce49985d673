//! Text-to-video person retrieval.
//!
//! Videos are encoded by a divided space-time transformer (appearance) and a
//! separable-convolution motion extractor feeding a transformer (motion); the
//! two are fused by a transformer aggregator. Captions are encoded by a
//! bidirectional transformer. Training pulls matched caption/video pairs
//! together with a temperature-scaled contrastive loss over relation scores,
//! and retrieval quality is reported as recall-at-N and median rank.

mod binio;
pub mod ablation;
pub mod caption;
pub mod checkpoint;
pub mod commands;
pub mod clip;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod motion;
pub mod relation;
pub mod tensor;
pub mod train;
pub mod visual;

pub use error::{Error, Result};
