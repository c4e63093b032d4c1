//! The default proxy fitness: negative mean next-token cross-entropy on a
//! held corpus. A scalar, higher-is-better signal — the only property the
//! search strategies rely on.

use crate::arch::ArchDescriptor;
use crate::error::{GlueError, Result};
use crate::search::FitnessEvaluator;
use crate::store::{Tensor, TensorStore};
use crate::toy::{forward, TokenBatch};

/// Sum of next-token cross-entropies over one sequence, plus the number of
/// predicted positions. Accumulated in f64 for stability.
pub fn sequence_cross_entropy(logits: &Tensor, tokens: &[u32]) -> (f64, usize) {
    let t = tokens.len();
    let vocab = logits.shape()[1];
    let mut total = 0.0f64;
    for pos in 0..t - 1 {
        let row = logits.row(pos);
        debug_assert_eq!(row.len(), vocab);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut sum = 0.0f64;
        for &l in row {
            sum += (l as f64 - max).exp();
        }
        let target = tokens[pos + 1] as usize;
        total += max + sum.ln() - row[target] as f64;
    }
    (total, t - 1)
}

/// Mean next-token cross-entropy of a dense model over a corpus.
pub fn corpus_cross_entropy(
    store: &TensorStore,
    desc: &ArchDescriptor,
    corpus: &TokenBatch,
) -> Result<f64> {
    validate_corpus(corpus, desc.vocab_size)?;
    let logits = forward(store, desc, corpus)?;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (l, seq) in logits.iter().zip(&corpus.sequences) {
        let (ce, n) = sequence_cross_entropy(l, seq);
        total += ce;
        count += n;
    }
    Ok(total / count as f64)
}

pub fn validate_corpus(corpus: &TokenBatch, vocab_size: usize) -> Result<()> {
    corpus.validate(vocab_size)?;
    if corpus.sequences.iter().any(|s| s.len() < 2) {
        return Err(GlueError::InvalidArg(
            "corpus sequences must have length >= 2".into(),
        ));
    }
    Ok(())
}

/// Fitness evaluator scoring a model by `-(mean next-token cross-entropy)`.
#[derive(Debug, Clone)]
pub struct PerplexityFitness {
    corpus: TokenBatch,
    id: String,
}

impl PerplexityFitness {
    pub fn new(corpus: TokenBatch) -> Result<Self> {
        if corpus.sequences.is_empty() || corpus.sequences.iter().any(|s| s.len() < 2) {
            return Err(GlueError::InvalidArg(
                "degenerate corpus: need non-empty sequences of length >= 2".into(),
            ));
        }
        Ok(PerplexityFitness {
            corpus,
            id: "toy-ppl".to_string(),
        })
    }

    pub fn corpus(&self) -> &TokenBatch {
        &self.corpus
    }
}

impl FitnessEvaluator for PerplexityFitness {
    fn id(&self) -> &str {
        &self.id
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn evaluate(&self, store: &TensorStore, desc: &ArchDescriptor) -> Result<f64> {
        Ok(-corpus_cross_entropy(store, desc, &self.corpus)?)
    }
}
