use std::collections::HashMap;
use std::hash::Hash;

use crate::base_lm::NextTokenModel;
use crate::error::{Error, Result};

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and the number of hypothesis n-grams.
pub fn clipped_matches<T: Eq + Hash>(hypothesis: &[T], references: &[Vec<T>], n: usize) -> (usize, usize) {
    let hyp = ngram_counts(hypothesis, n);
    let mut max_ref: HashMap<&[T], usize> = HashMap::new();
    for r in references {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let clipped = hyp
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (clipped, hypothesis.len().saturating_sub(n - 1))
}

/// Sentence-level BLEU-4 with uniform weights.
///
/// A zero match count for n >= 2 is smoothed to `1 / (total + 1)`; zero
/// unigram matches give 0. The brevity penalty uses the reference length
/// closest to the hypothesis (the shorter one on ties).
pub fn bleu4<T: Eq + Hash>(hypothesis: &[T], references: &[Vec<T>]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Empty("references"));
    }
    if hypothesis.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (clipped, total) = clipped_matches(hypothesis, references, n);
        let p = if clipped > 0 {
            clipped as f64 / total as f64
        } else if n == 1 {
            return Ok(0.0);
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += 0.25 * p.ln();
    }
    let c = hypothesis.len() as f64;
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(hypothesis.len()), len))
        .expect("non-empty references") as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(bp * log_sum.exp())
}

/// Whitespace-separated words, the unit BLEU is computed over.
pub fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Fraction of next-token positions where the greedy prediction is right.
pub fn code_accuracy<M: NextTokenModel + ?Sized>(model: &M, corpus: &[Vec<u32>]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for seq in corpus.iter().filter(|s| s.len() >= 2) {
        let logits = model.logits(seq)?;
        for i in 0..seq.len() - 1 {
            total += 1;
            if logits.argmax_row(i) as u32 == seq[i + 1] {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Empty("evaluation corpus"));
    }
    Ok(hits as f64 / total as f64)
}
