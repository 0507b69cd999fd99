//! Desk-scale decoder-only transformer runtime for sparse retrieval-augmented
//! generation.
//!
//! Retrieved contexts are prefilled independently into a segmented KV cache
//! (no cross-context attention, per-context restarted position ids), each
//! context is scored for relevance by the probability the model assigns to a
//! "good" rating after a control token, and decoding attends only to the
//! question plus the segments that clear the score threshold. The crate also
//! ships the matching trainer (assessment + generation task mixture), an
//! evaluation and threshold-sweep harness, encode/decode throughput
//! benchmarks, and a two-round LLM auto-labeling pipeline for building
//! relevance labels.
//!
//! With the default `parallel` feature the data-parallel inner loops (context
//! prefill, assessment, corpus generation, batched gradients, sweeps) run on
//! rayon; without it they degrade to sequential loops with identical results.

pub mod artifact;
pub mod cache;
pub mod data;
pub mod error;
pub mod eval;
pub mod labeler;
pub mod layout;
pub mod model;
pub(crate) mod par;
pub mod pipeline;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
