//! Transformer-decoder inference with pluggable audio-token reduction.
//!
//! The [`runtime`] runs prefill and decoding with hook points between
//! layers. [`reduction`] holds the token-reduction policies (weighted
//! adjacent-cluster merge and the baselines), [`schedule`] spreads a token
//! budget across layers or picks a single operation layer by transfer
//! entropy, and [`metrics`] does FLOPs, latency and KV-cache accounting.

pub mod error;
pub mod metrics;
pub mod reduction;
pub mod runtime;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
