//! Byte tokenizer and the small causal transformer used as the frozen base.

mod model;
mod tokenizer;
mod train;

pub use model::{BaseConfig, BaseGraph, BaseModel};
pub use tokenizer::{Tokenizer, BOS, EOS, PAD, VOCAB_SIZE};
pub use train::{generate_greedy, perplexity, pretrain, shifted_targets, NextTokenModel, PretrainConfig, PretrainReport};
