//! Pathology report generation from bags of patch features, built around
//! bi-modal concurrent learning: a learnable visual token summarizes the
//! patch set through cross-attention, high-attention patches drive retrieval
//! from a sentence-embedding knowledge bank, and a learnable textual token
//! condenses the retrieved knowledge. A two-token multi-modal decoder emits
//! the report autoregressively.
//!
//! Everything is self-contained: a small reverse-mode autodiff core, a
//! synthetic aligned corpus generator standing in for a vision-language
//! extractor, exact cosine retrieval, training/evaluation loops, and NLP
//! metrics. With the default `parallel` feature, per-case work (corpus
//! generation, evaluation, sweeps) runs on rayon; disabling the feature
//! falls back to sequential execution with identical results.

pub mod bank;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod par;
pub mod retrieval;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use error::Error;

/// Convenience alias used by fallible pipeline functions.
pub type Result<V> = std::result::Result<V, Error>;
