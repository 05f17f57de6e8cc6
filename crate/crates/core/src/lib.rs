//! Knowledge-graph-enhanced recommendation with box embeddings.
//!
//! Items are points and tags, relations, and user interests are axis-aligned
//! boxes. The library provides the geometric kernel, dataset loading and
//! typed-triplet indexing, the trainable parameter store with two learned
//! intersection operators, a three-stage training pipeline with hand-derived
//! gradients, the all-ranking top-K evaluation protocol, a synthetic benchmark
//! with planted ground truth, and a 2-D PCA export for inspecting embeddings.

pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod projection;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
