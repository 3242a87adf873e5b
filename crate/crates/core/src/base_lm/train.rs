use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::BaseModel;
use super::tokenizer::{Tokenizer, EOS};
use crate::error::{Error, Result};
use crate::tensor::{accumulate_grads, row_nll, AdamWConfig, DenseArray, OptimizerState, Reduction, Tape};

/// Anything that maps a token prefix to per-position next-token logits.
pub trait NextTokenModel {
    /// `[len, vocab]` logits for `tokens`.
    fn logits(&self, tokens: &[u32]) -> Result<DenseArray>;

    fn max_seq_len(&self) -> usize;
}

impl NextTokenModel for BaseModel {
    fn logits(&self, tokens: &[u32]) -> Result<DenseArray> {
        Ok(self.forward(tokens)?.1)
    }

    fn max_seq_len(&self) -> usize {
        self.config().max_seq_len
    }
}

/// Next-token targets for packed sequences; the last position of each
/// sequence has no target.
pub fn shifted_targets<S: AsRef<[u32]>>(batch: &[S]) -> Vec<Option<u32>> {
    let mut out = Vec::new();
    for seq in batch {
        let seq = seq.as_ref();
        out.extend(seq.iter().skip(1).map(|&t| Some(t)));
        if !seq.is_empty() {
            out.push(None);
        }
    }
    out
}

/// `exp(mean NLL)` over every next-token position of `corpus`.
pub fn perplexity<M: NextTokenModel + ?Sized>(model: &M, corpus: &[Vec<u32>]) -> Result<f64> {
    let mut nll = 0.0f64;
    let mut count = 0usize;
    for seq in corpus {
        if seq.len() < 2 {
            continue;
        }
        let logits = model.logits(seq)?;
        for (i, &target) in seq.iter().enumerate().skip(1) {
            nll += row_nll(logits.row(i - 1), target as usize);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("corpus"));
    }
    Ok((nll / count as f64).exp())
}

/// Appends the argmax token (lowest id on ties) until EOS, `max_new` tokens,
/// or the context is full. Returns only the continuation bytes.
pub fn generate_greedy<M: NextTokenModel + ?Sized>(model: &M, prompt: &[u8], max_new: usize) -> Result<Vec<u8>> {
    let tokenizer = Tokenizer::new(model.max_seq_len());
    let mut tokens = tokenizer.encode_prompt(prompt);
    let mut out = Vec::new();
    while out.len() < max_new && tokens.len() < model.max_seq_len() {
        let logits = model.logits(&tokens)?;
        let next = logits.argmax_row(tokens.len() - 1) as u32;
        if next == EOS || next > 255 {
            break;
        }
        out.push(next as u8);
        tokens.push(next);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Train sequences scored for the reported train perplexity.
    pub eval_sequences: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            base_lr: 3e-3,
            weight_decay: 0.01,
            eval_sequences: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub train_sequences: usize,
    pub heldout_sequences: usize,
    pub initial_heldout_perplexity: f64,
    pub final_train_loss: f64,
    pub train_perplexity: f64,
    pub heldout_perplexity: f64,
}

/// Next-token pretraining. The last 10% of `corpus` (at least one sequence)
/// is held out before any sampling.
pub fn pretrain(model: &mut BaseModel, corpus: &[Vec<u32>], config: &PretrainConfig) -> Result<PretrainReport> {
    if model.is_frozen() {
        return Err(Error::FrozenModel);
    }
    if corpus.len() < 2 {
        return Err(Error::CountMismatch {
            what: "pretraining sequences (at least)",
            expected: 2,
            got: corpus.len(),
        });
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let held = (corpus.len() / 10).max(1);
    let (train, heldout) = corpus.split_at(corpus.len() - held);
    let initial = perplexity(model, heldout)?;

    let mut opt = OptimizerState::new(AdamWConfig {
        base_lr: config.base_lr,
        weight_decay: config.weight_decay,
        total_steps: config.steps as u64,
        accumulation_steps: 1,
        ..AdamWConfig::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut last_loss = f64::NAN;
    for _ in 0..config.steps {
        let batch: Vec<&[u32]> = (0..config.batch_size)
            .map(|_| train[rng.random_range(0..train.len())].as_slice())
            .collect();
        let targets = shifted_targets(&batch);
        let mut tape = Tape::new();
        let graph = model.forward_on_tape(&mut tape, &batch)?;
        let loss = tape.cross_entropy(graph.logits, &targets, Reduction::Mean)?;
        last_loss = tape.scalar(loss) as f64;
        tape.backward(loss)?;
        let mut params = model.params_mut()?;
        accumulate_grads(&mut params, &tape)?;
        opt.step(params)?;
    }

    let eval_n = config.eval_sequences.clamp(1, train.len());
    Ok(PretrainReport {
        steps: config.steps,
        train_sequences: train.len(),
        heldout_sequences: heldout.len(),
        initial_heldout_perplexity: initial,
        final_train_loss: last_loss,
        train_perplexity: perplexity(model, &train[..eval_n])?,
        heldout_perplexity: perplexity(model, heldout)?,
    })
}
