//! Progressive columns over a frozen base, lateral adapters and logit fusion.

mod column;
mod network;

pub use column::{adapter_name, column_param_name, combined_hidden, fuse_logits, Column, LateralAdapter};
pub use network::{
    BaseFeatures, FrozenBase, GraphOptions, ParamSnapshot, ProgressiveNetwork, TaskGraph, TaskOutputs, TaskView,
};
pub(crate) use network::mix_seed;
