//! Desk-scale joint speech and accent recognition.
//!
//! The network decouples the two tasks with a triple encoder (shared, CTC,
//! attention) and two-granularity modeling units: fine pronunciation units for
//! the CTC and accent branches, coarse semantic units for the attention
//! branch. The accent branch is a LASAS classifier (linguistic-acoustic
//! similarity accent shift) fed with CTC-aligned text; its embedding is fused
//! back into the ASR branch. Inference combines attention beam search with CTC
//! forward scores of lexicon-expanded hypotheses (two-granularity rescoring).
//!
//! Everything runs on a built-in synthetic accented corpus, in f64, on CPU,
//! so gradients, detach boundaries, and decoding claims are all directly
//! checkable.

pub mod accent;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod decoding;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nnet;
pub mod rng;
pub mod synthgen;
pub mod training;
pub mod triple_encoder;
pub mod vocab;

pub use error::{Error, Result};

/// Dense f64 matrix; rows are time steps or sequence positions.
pub type Mat = ndarray::Array2<f64>;

/// Worker cap for sections that fan out across utterances, read from
/// `DIMNET_TOY_THREADS`. Defaults to 1. Results are collected in input
/// order, so the thread count never changes any output.
pub fn toy_threads() -> usize {
    std::env::var("DIMNET_TOY_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}
