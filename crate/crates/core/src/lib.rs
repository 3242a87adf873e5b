//! Continual learning with progressive columns over a frozen byte-level
//! transformer.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense arrays, a differentiation tape, AdamW, checkpoints.
//! - [`base_lm`]: byte tokenizer and the small causal transformer that gets
//!   pretrained once and then frozen.
//! - [`pnn`]: task columns, lateral adapters and logit fusion.
//! - [`adaptation`]: EWC, LoRA, experience replay, first-order meta-learning
//!   and the per-task training loop.
//! - [`agent`]: data sources, the capped JSONL record store, corpus building
//!   and the collect/train/evaluate orchestrator.
//! - [`harness`]: metrics, experiment runner, ablations and report tables.

pub mod adaptation;
pub mod agent;
pub mod base_lm;
mod error;
pub mod harness;
pub mod pnn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DenseArray, Tape, Var};
