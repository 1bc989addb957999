//! Length-grouped batching.
//!
//! Pairs are sorted by target length, then source length, then corpus index, and
//! consecutive runs are packed greedily under a padded-token budget. The plan's
//! membership is fixed; only the order of batches changes between epochs.

use log::warn;

use crate::data::batch::SequencePair;
use crate::error::{Error, Result};
use crate::numerics::rng::RngStream;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochPlan {
    /// Corpus indices per batch, in packing order.
    pub batches: Vec<Vec<usize>>,
    pub seed: u64,
    /// Batch ordinals holding a single pair whose cost exceeds the budget.
    pub oversized: Vec<usize>,
}

impl EpochPlan {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

fn pair_cost(p: &SequencePair) -> usize {
    p.source.len().max(p.target.len())
}

/// Greedy packing of `pairs` in the given order.
///
/// A batch closes when adding the next pair would push
/// `rows * max(padded source, padded target)` past `max_tokens` or the row count
/// past `max_sentences`.
pub fn pack_in_order(
    pairs: &[&SequencePair],
    max_tokens: usize,
    max_sentences: Option<usize>,
) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut oversized = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut width = 0usize;
    for p in pairs {
        let w = width.max(pair_cost(p));
        let rows = current.len() + 1;
        let over_budget = rows * w > max_tokens;
        let over_rows = max_sentences.is_some_and(|m| rows > m);
        if !current.is_empty() && (over_budget || over_rows) {
            batches.push(std::mem::take(&mut current));
            width = 0;
        }
        width = width.max(pair_cost(p));
        current.push(p.index);
        if current.len() == 1 && width > max_tokens {
            oversized.push(batches.len());
            batches.push(std::mem::take(&mut current));
            width = 0;
        }
    }
    if !current.is_empty() {
        batches.push(current);
    }
    (batches, oversized)
}

pub fn make_batches(
    pairs: &[SequencePair],
    max_tokens: usize,
    max_sentences: Option<usize>,
    seed: u64,
) -> Result<EpochPlan> {
    if max_tokens < 1 {
        return Err(Error::Invalid("max_tokens must be at least 1".into()));
    }
    if max_sentences == Some(0) {
        return Err(Error::Invalid("max_sentences must be at least 1".into()));
    }
    let mut order: Vec<&SequencePair> = pairs.iter().collect();
    order.sort_by_key(|p| (p.target.len(), p.source.len(), p.index));
    let (batches, oversized) = pack_in_order(&order, max_tokens, max_sentences);
    for &b in &oversized {
        let idx = batches[b][0];
        warn!("pair {idx} exceeds max_tokens={max_tokens} on its own; kept as a singleton batch");
    }
    Ok(EpochPlan {
        batches,
        seed,
        oversized,
    })
}

/// Order of batch ordinals for `epoch` (1-based), drawn from stream `epoch`.
pub fn shuffle_epoch(plan: &EpochPlan, epoch: u64) -> Result<Vec<usize>> {
    if epoch < 1 {
        return Err(Error::Invalid("epochs are numbered from 1".into()));
    }
    let mut order: Vec<usize> = (0..plan.len()).collect();
    RngStream::new(plan.seed, epoch).shuffle(&mut order);
    Ok(order)
}

/// Pad cells over total cells across the source and target matrices.
pub fn padding_ratio(pairs: &[SequencePair], batches: &[Vec<usize>]) -> f64 {
    let by_index: std::collections::HashMap<usize, &SequencePair> = pairs.iter().map(|p| (p.index, p)).collect();
    let mut total = 0usize;
    let mut real = 0usize;
    for batch in batches {
        let members: Vec<&SequencePair> = batch.iter().map(|i| by_index[i]).collect();
        let s = members.iter().map(|p| p.source.len()).max().unwrap_or(0);
        let t = members.iter().map(|p| p.target.len()).max().unwrap_or(0);
        total += members.len() * (s + t);
        real += members.iter().map(|p| p.source.len() + p.target.len()).sum::<usize>();
    }
    if total == 0 {
        0.0
    } else {
        (total - real) as f64 / total as f64
    }
}
