//! Frequency-aware sequential recommendation lab.
//!
//! The pipeline: ingest and split interaction logs, build the item co-occurrence
//! graph, purify ID embeddings with a polynomial graph low-pass filter, run a
//! frozen Transformer stack with optional temporal Butterworth filtering after
//! every layer, and measure how graph-frequency energy moves across layers.

pub mod error;
pub mod glpf;
pub mod graph;
pub mod dataset;
pub mod numcore;
pub mod spectral;
pub mod tfm;
pub mod model;
pub mod evalharness;
pub mod analysis;
pub mod config;
pub mod pipeline;

pub use error::{Error, Result};
