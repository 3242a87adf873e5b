//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use pnn_core::base_lm::{BaseConfig, BaseModel, VOCAB_SIZE};
use pnn_core::pnn::{FrozenBase, ProgressiveNetwork};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A default-sized base (untrained; timing does not depend on the weights).
pub fn base() -> Arc<FrozenBase> {
    FrozenBase::new(BaseModel::new(BaseConfig::default()).expect("default config is valid"))
}

/// A network with `columns` columns, all but the last frozen.
pub fn network(base: &Arc<FrozenBase>, columns: u32) -> ProgressiveNetwork {
    let mut net = ProgressiveNetwork::new(Arc::clone(base), 0.7, 0).expect("valid alpha");
    for task in 0..columns {
        let col = net.add_column(task).expect("new task");
        if task + 1 < columns {
            net.freeze_column(col).expect("column exists");
        }
    }
    net
}

/// `count` random full-length sequences.
pub fn sequences(count: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..len).map(|_| rng.random_range(0..VOCAB_SIZE as u32)).collect())
        .collect()
}
