use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{meta_adapt, meta_outer_step, steps_to_threshold};
use crate::agent::{DataSource, SyntheticDialogSource};
use crate::error::{Error, Result};
use crate::pnn::{mix_seed, FrozenBase, ProgressiveNetwork};

/// Few-shot adaptation to an unseen dialog fact table, from a fresh column
/// and from one warmed up by first-order meta-learning on other tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaTrialConfig {
    pub train_variants: Vec<u64>,
    pub heldout_variant: u64,
    pub records_per_variant: usize,
    pub support: usize,
    pub outer_rounds: usize,
    pub tasks_per_round: usize,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    /// Plain gradient-descent rate used to count steps on the held-out task.
    pub adapt_lr: f64,
    pub threshold: f64,
    pub max_steps: usize,
    pub alpha: f32,
}

impl Default for MetaTrialConfig {
    fn default() -> Self {
        Self {
            train_variants: vec![1, 2, 3, 4],
            heldout_variant: 5,
            records_per_variant: 64,
            support: 8,
            outer_rounds: 20,
            tasks_per_round: 2,
            inner_steps: 5,
            inner_lr: 1.0,
            outer_lr: 0.5,
            adapt_lr: 1.0,
            threshold: 0.3,
            max_steps: 200,
            alpha: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaTrial {
    pub seed: u64,
    pub initial_loss_plain: f64,
    pub initial_loss_meta: f64,
    /// `None` when the threshold was not reached within `max_steps`.
    pub steps_plain: Option<usize>,
    pub steps_meta: Option<usize>,
}

fn variant_pool(tag: &str, variant: u64, seed: u64, n: usize, seq_len: usize) -> Result<Vec<Vec<u32>>> {
    let tok = crate::base_lm::Tokenizer::new(seq_len);
    let mut src = SyntheticDialogSource::with_variant(tag, seed, n, variant);
    let mut out = Vec::with_capacity(n);
    while let Some(doc) = src.fetch_next()? {
        out.extend(tok.chunk(&doc.text));
    }
    Ok(out)
}

pub fn meta_trial(base: &Arc<FrozenBase>, config: &MetaTrialConfig, seed: u64) -> Result<MetaTrial> {
    if config.train_variants.is_empty() || config.support == 0 || config.tasks_per_round == 0 {
        return Err(Error::Config("meta trial needs variants, support and tasks per round".into()));
    }
    let mut net = ProgressiveNetwork::new(Arc::clone(base), config.alpha, seed)?;
    net.add_column(0)?;
    let seq_len = net.max_seq_len();
    let pools: Vec<Vec<Vec<u32>>> = config
        .train_variants
        .iter()
        .map(|&v| variant_pool("meta", v, mix_seed(0x3e7a, v), config.records_per_variant, seq_len))
        .collect::<Result<_>>()?;
    let heldout = variant_pool(
        "heldout",
        config.heldout_variant,
        mix_seed(0x3e7a, 0xfeed),
        config.support,
        seq_len,
    )?;
    let count = |n: &ProgressiveNetwork| {
        steps_to_threshold(n, 0, &heldout, config.adapt_lr, config.threshold, config.max_steps)
    };
    let initial = |n: &ProgressiveNetwork| -> Result<f64> {
        let names = crate::adaptation::active_trainable(n, 0)?;
        Ok(crate::adaptation::loss_and_grads(n, 0, &heldout, &names)?.0)
    };
    let initial_loss_plain = initial(&net)?;
    let steps_plain = count(&net)?;

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x3e7a));
    for _ in 0..config.outer_rounds {
        let mut snapshots = Vec::with_capacity(config.tasks_per_round);
        for _ in 0..config.tasks_per_round {
            let pool = pools.choose(&mut rng).expect("non-empty");
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            idx.shuffle(&mut rng);
            let support: Vec<Vec<u32>> = idx.iter().take(config.support).map(|&i| pool[i].clone()).collect();
            snapshots.push(meta_adapt(&net, 0, &support, config.inner_steps, config.inner_lr)?);
        }
        meta_outer_step(&mut net, &snapshots, config.outer_lr)?;
    }
    Ok(MetaTrial {
        seed,
        initial_loss_plain,
        initial_loss_meta: initial(&net)?,
        steps_plain,
        steps_meta: count(&net)?,
    })
}
