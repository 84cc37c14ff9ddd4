//! Span extraction with explicit label-knowledge fusion.
//!
//! The crate implements the full pipeline: a tiny trainable transformer
//! encoder shared between text and label annotations, a semantics-guided
//! fusion module that injects label knowledge into token representations,
//! probabilistic start/end span decoding (flat and nested), training with
//! Adam and linear learning-rate decay, and a paradigm benchmark comparing
//! this architecture against traditional and joint-encoding pipelines.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoding;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod loss;
pub mod model;
pub mod metrics;
pub mod paradigm;
pub mod params;
pub mod scoring;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Rng, Tensor};
