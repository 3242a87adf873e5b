use std::collections::VecDeque;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(task_id, tokens)`.
pub type TaskSequence = (u32, Vec<u32>);

/// Fixed-capacity FIFO of past task sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: VecDeque<TaskSequence>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(4096)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &TaskSequence> {
        self.entries.iter()
    }

    /// Appends, evicting the oldest entry when full.
    pub fn push(&mut self, task_id: u32, tokens: Vec<u32>) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((task_id, tokens));
    }

    /// `n` uniform draws, without replacement while `n <= len`.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<TaskSequence> {
        if self.entries.is_empty() {
            return Vec::new();
        }
        if n <= self.entries.len() {
            index::sample(rng, self.entries.len(), n)
                .into_iter()
                .map(|i| self.entries[i].clone())
                .collect()
        } else {
            (0..n)
                .map(|_| self.entries[rng.random_range(0..self.entries.len())].clone())
                .collect()
        }
    }
}

/// A batch after replay mixing.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub items: Vec<TaskSequence>,
    pub replayed: usize,
    pub warning: Option<String>,
}

/// Replaces the trailing `floor(fraction * len)` items of `batch` with buffer
/// samples. An empty buffer leaves the batch unchanged and sets `warning`.
pub fn replay_mix(buffer: &ReplayBuffer, batch: &[TaskSequence], fraction: f64, seed: u64) -> Result<MixedBatch> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("replay fraction {fraction} outside [0, 1]")));
    }
    let n = (fraction * batch.len() as f64).floor() as usize;
    let mut items = batch.to_vec();
    if n == 0 {
        return Ok(MixedBatch {
            items,
            replayed: 0,
            warning: None,
        });
    }
    if buffer.is_empty() {
        return Ok(MixedBatch {
            items,
            replayed: 0,
            warning: Some(format!("replay buffer empty; {n} slots left as task data")),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = buffer.sample(n, &mut rng);
    let keep = items.len() - n;
    items.truncate(keep);
    items.extend(samples);
    Ok(MixedBatch {
        items,
        replayed: n,
        warning: None,
    })
}
