//! EWC, LoRA, experience replay, first-order meta-learning and task training.

mod fisher;
mod lora;
mod meta;
mod replay;
mod train;

pub use fisher::{estimate_fisher, ewc_penalty, ewc_penalty_on_tape, FisherInfo};
pub use lora::LoraAdapter;
pub use meta::{
    active_trainable, inner_loop, loss_and_grads, meta_adapt, meta_adapt_trace, meta_outer_step, outer_update,
    steps_to_threshold,
};
pub use replay::{replay_mix, MixedBatch, ReplayBuffer, TaskSequence};
pub use train::{train_task, TaskReport, TrainConfig};

use crate::error::Result;
use crate::pnn::ProgressiveNetwork;

/// Attaches a LoRA residual of `rank` to `target` (a frozen column's `w1`
/// or `w2`).
pub fn attach_lora<'a>(net: &'a mut ProgressiveNetwork, target: &str, rank: usize) -> Result<&'a LoraAdapter> {
    net.attach_lora(target, rank, 1.0)
}
