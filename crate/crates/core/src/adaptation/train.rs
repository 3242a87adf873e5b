use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fisher::{ewc_penalty_on_tape, FisherInfo};
use super::meta::active_trainable;
use super::replay::{replay_mix, ReplayBuffer, TaskSequence};
use crate::base_lm::{perplexity, shifted_targets};
use crate::error::{Error, Result};
use crate::pnn::{mix_seed, GraphOptions, ProgressiveNetwork};
use crate::tensor::{accumulate_grads, AdamWConfig, OptimizerState, Reduction, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub micro_batch: usize,
    pub accumulation_steps: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub ewc_lambda: f64,
    pub replay_fraction: f64,
    pub replay_capacity: usize,
    /// Sequences of each finished task pushed into the replay buffer.
    pub replay_push: usize,
    pub lora_rank: usize,
    pub lora_scale: f32,
    pub meta_inner_steps: usize,
    pub meta_inner_lr: f64,
    pub meta_outer_lr: f64,
    /// Outer iterations of the warm-up run when a column is added.
    pub meta_rounds: usize,
    /// Support sets per outer iteration.
    pub meta_tasks: usize,
    /// Sequences per support set.
    pub meta_support: usize,
    pub fisher_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            micro_batch: 64,
            accumulation_steps: 4,
            epochs: 1,
            base_lr: 1e-4,
            weight_decay: 0.01,
            ewc_lambda: 100.0,
            replay_fraction: 0.2,
            replay_capacity: 256,
            replay_push: 64,
            lora_rank: 4,
            lora_scale: 1.0,
            meta_inner_steps: 5,
            meta_inner_lr: 1e-3,
            meta_outer_lr: 0.5,
            meta_rounds: 1,
            meta_tasks: 2,
            meta_support: 8,
            fisher_samples: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("micro_batch", self.micro_batch),
            ("accumulation_steps", self.accumulation_steps),
            ("epochs", self.epochs),
            ("lora_rank", self.lora_rank),
            ("fisher_samples", self.fisher_samples),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        let rates = [
            ("base_lr", self.base_lr),
            ("meta_inner_lr", self.meta_inner_lr),
            ("meta_outer_lr", self.meta_outer_lr),
        ];
        if let Some((name, v)) = rates.iter().find(|(_, v)| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
        if !(0.0..=1.0).contains(&self.replay_fraction) {
            return Err(Error::Config(format!(
                "replay_fraction {} outside [0, 1]",
                self.replay_fraction
            )));
        }
        if self.ewc_lambda < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("ewc_lambda and weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    fn optimizer(&self, total_steps: u64) -> AdamWConfig {
        AdamWConfig {
            base_lr: self.base_lr,
            weight_decay: self.weight_decay,
            total_steps,
            accumulation_steps: self.accumulation_steps,
            ..AdamWConfig::default()
        }
    }
}

/// Outcome of one [`train_task`] call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_id: u32,
    pub column: usize,
    pub optimizer_steps: u64,
    pub micro_batches: usize,
    pub final_train_loss: f64,
    pub heldout_perplexity: f64,
    pub replayed_items: usize,
    pub updated_parameters: Vec<String>,
    pub warnings: Vec<String>,
    /// Excluded from serialized reports so they stay reproducible.
    #[serde(skip)]
    pub wall_time: Duration,
}

/// Records the mean cross-entropy of `items`, each routed along its own
/// task's path, plus the EWC term when `fisher` is given.
pub(crate) fn batch_loss(
    tape: &mut Tape,
    net: &ProgressiveNetwork,
    items: &[TaskSequence],
    trainable: &BTreeSet<String>,
    fisher: Option<(&FisherInfo, f64)>,
) -> Result<Var> {
    let opts = GraphOptions {
        grad: Some(trainable),
        materialize_lora: false,
    };
    let mut groups: BTreeMap<u32, Vec<&[u32]>> = BTreeMap::new();
    for (task, seq) in items {
        groups.entry(*task).or_default().push(seq);
    }
    let mut total: Option<Var> = None;
    let mut targets_count = 0usize;
    for (task, seqs) in &groups {
        let column = net.task_column(*task)?;
        let (h, l) = net.stacked_features(seqs)?;
        let hv = tape.constant(&h);
        let lv = tape.constant(&l);
        let graph = net.task_graph(tape, hv, lv, column, opts)?;
        let targets = shifted_targets(seqs);
        targets_count += targets.iter().filter(|t| t.is_some()).count();
        let ce = tape.cross_entropy(graph.logits, &targets, Reduction::Sum)?;
        total = Some(match total {
            None => ce,
            Some(t) => tape.add(t, ce)?,
        });
    }
    let total = total.ok_or(Error::Empty("batch"))?;
    let mut loss = tape.scale(total, 1.0 / targets_count.max(1) as f64);
    if let Some((fi, lambda)) = fisher {
        if lambda > 0.0 {
            if let Some(p) = ewc_penalty_on_tape(tape, net, fi, lambda, opts)? {
                loss = tape.add(loss, p)?;
            }
        }
    }
    Ok(loss)
}

/// Next-token training of `task_id`'s trainable parameters on `train`.
///
/// Each micro-batch is replay-mixed, its loss backpropagated and the
/// gradients summed; every `accumulation_steps` micro-batches AdamW applies
/// their mean. Afterwards `replay_push` sequences of `train` enter `buffer`.
pub fn train_task(
    net: &mut ProgressiveNetwork,
    task_id: u32,
    train: &[Vec<u32>],
    heldout: &[Vec<u32>],
    config: &TrainConfig,
    fisher: Option<&FisherInfo>,
    buffer: &mut ReplayBuffer,
) -> Result<TaskReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let started = Instant::now();
    let column = net.task_column(task_id)?;
    let trainable = active_trainable(net, task_id)?;

    let micro_per_epoch = train.len().div_ceil(config.micro_batch);
    let steps_per_epoch = micro_per_epoch.div_ceil(config.accumulation_steps);
    let total_steps = (steps_per_epoch * config.epochs) as u64;
    let mut opt = OptimizerState::new(config.optimizer(total_steps))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, u64::from(task_id)));

    let mut warnings = Vec::new();
    let mut replayed = 0usize;
    let mut last_loss = f64::NAN;
    let mut micro_index = 0u64;
    let mut pending = 0usize;
    let fisher_term = fisher.map(|f| (f, config.ewc_lambda));

    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.micro_batch) {
            let batch: Vec<TaskSequence> = chunk.iter().map(|&i| (task_id, train[i].clone())).collect();
            let mixed = replay_mix(
                buffer,
                &batch,
                config.replay_fraction,
                mix_seed(config.seed, micro_index ^ 0x5eed),
            )?;
            micro_index += 1;
            replayed += mixed.replayed;
            if let Some(w) = mixed.warning {
                if !warnings.contains(&w) {
                    warnings.push(w);
                }
            }

            let mut tape = Tape::new();
            let loss = batch_loss(&mut tape, net, &mixed.items, &trainable, fisher_term)?;
            last_loss = f64::from(tape.scalar(loss));
            tape.backward(loss)?;
            let mut params = net.params_mut();
            accumulate_grads(&mut params, &tape)?;
            pending += 1;

            if pending == config.accumulation_steps {
                step(net, &mut opt, &trainable, pending)?;
                pending = 0;
            }
        }
        if pending > 0 {
            step(net, &mut opt, &trainable, pending)?;
            pending = 0;
        }
    }

    let mut push_order: Vec<usize> = (0..train.len()).collect();
    push_order.shuffle(&mut rng);
    for &i in push_order.iter().take(config.replay_push) {
        buffer.push(task_id, train[i].clone());
    }

    let heldout_perplexity = if heldout.is_empty() {
        f64::NAN
    } else {
        perplexity(&net.task_view(task_id), heldout)?
    };
    Ok(TaskReport {
        task_id,
        column,
        optimizer_steps: opt.step_count(),
        micro_batches: micro_index as usize,
        final_train_loss: last_loss,
        heldout_perplexity,
        replayed_items: replayed,
        updated_parameters: trainable.into_iter().collect(),
        warnings,
        wall_time: started.elapsed(),
    })
}

fn step(
    net: &mut ProgressiveNetwork,
    opt: &mut OptimizerState,
    trainable: &BTreeSet<String>,
    micro_batches: usize,
) -> Result<()> {
    let params = net
        .params_mut()
        .into_iter()
        .filter(|(n, _)| trainable.contains(n));
    opt.step_accumulated(params, micro_batches)
}
