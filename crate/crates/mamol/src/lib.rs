//! Missing-aware mixture-of-LoRA experts on a frozen transformer backbone.
//!
//! The crate bundles everything needed to study multimodal classification
//! when modalities go missing: a small f64 autodiff tape, a synthetic
//! correlated multimodal data generator with an exact missing-rate protocol,
//! a frozen mini-transformer with per-modality encoders, the mixture-of-LoRA
//! adaptation mechanism (pattern-routed dynamic experts plus shared and
//! modality-specific static experts), three comparison MoE paradigms, an
//! Adam trainer with linear warmup/decay, and an experiment harness (metric
//! oracles, grids, ablations, generalization sweeps).
//!
//! See the `examples/` directory for one runnable walkthrough per
//! capability, and the `mamol` binary for the batch CLI.

pub mod data;
pub mod error;
pub mod tensor;

pub use error::{Error, Result};
