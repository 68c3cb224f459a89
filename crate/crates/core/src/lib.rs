//! Concentration-driven prompt optimization on a small introspectable
//! transformer.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: `f64` tensors with reverse-mode autodiff and AdamW.
//! - [`model`]: the frozen masked-token encoder whose attention is captured.
//! - [`concentration`]: lookback attention from the mask token to the prompt.
//! - [`soft`]: the concentration-reweighting soft-prompt objective and trainer.
//! - [`hard`]: score-based prompt filtering and the multi-agent prompt matcher.
//! - [`corpus`]: synthetic multi-domain data, JSONL ingestion, prompt pools.
//! - [`harness`]: end-to-end experiments and report emission.

pub mod canonical;
pub mod checkpoint;
pub mod concentration;
pub mod corpus;
pub mod error;
pub mod hard;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod soft;

pub use error::{Error, Result};
