//! Conditional next-token models.
//!
//! Every model is re-conditioned on the full prefix per call; there is no
//! incremental cache. Seeded realizations are reproducible bit-for-bit.

mod draft;
mod layered;
mod probe;
mod tabular;

pub use draft::MixedDraft;
pub use layered::{LayeredConfig, LayeredTargetModel};
pub use probe::TabularProbe;
pub use tabular::{TabularConfig, TabularMarkovModel};

use crate::error::{Error, Result};
use crate::tree::{Candidate, CandidateSet, NodeId, TokenId, TokenTree, VerifyLayout};

/// A conditional next-token distribution over a vocabulary of size `V`.
pub trait ProbModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Probability vector of length `V` summing to one.
    fn next_dist(&self, prefix: &[TokenId]) -> Vec<f64>;
}

/// A model that exposes per-layer hidden states, used for early-exit scoring
/// and predictor training.
pub trait LayeredModel: ProbModel {
    fn num_layers(&self) -> usize;

    fn hidden_dim(&self) -> usize;

    /// Hidden state after `layer` (1-based, `1..=num_layers()`).
    fn hidden_at(&self, layer: usize, prefix: &[TokenId]) -> Result<Vec<f64>>;

    /// Final-layer logits `z` with `softmax(z) == next_dist`.
    fn final_logits(&self, prefix: &[TokenId]) -> Vec<f64>;

    /// Hidden states for many prefixes at once. Must equal calling
    /// [`LayeredModel::hidden_at`] row by row.
    fn hidden_batch(&self, layer: usize, prefixes: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>> {
        prefixes.iter().map(|p| self.hidden_at(layer, p)).collect()
    }
}

impl<M: ProbModel + ?Sized> ProbModel for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn next_dist(&self, prefix: &[TokenId]) -> Vec<f64> {
        (**self).next_dist(prefix)
    }
}

impl<M: ProbModel + ?Sized> ProbModel for std::sync::Arc<M> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn next_dist(&self, prefix: &[TokenId]) -> Vec<f64> {
        (**self).next_dist(prefix)
    }
}

/// Index of the largest entry; ties go to the smaller index.
pub fn argmax(values: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best as TokenId
}

pub(crate) fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in logits.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in logits.iter_mut() {
        *x /= sum;
    }
}

/// Top-`k` tokens by draft probability, descending, ties toward the smaller
/// token id.
pub fn draft_candidates(model: &dyn ProbModel, prefix: &[TokenId], k: usize) -> Result<CandidateSet> {
    let v = model.vocab_size();
    if v == 0 {
        return Err(Error::config("model has an empty vocabulary"));
    }
    if k == 0 || k > v {
        return Err(Error::config(format!("candidate count k={k} must be in 1..={v}")));
    }
    let dist = model.next_dist(prefix);
    let mut order: Vec<usize> = (0..v).collect();
    // stable sort keeps index order among equal probabilities
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]));
    let entries = order[..k]
        .iter()
        .map(|&t| Candidate { token: t as TokenId, p_draft: dist[t].clamp(0.0, 1.0) })
        .collect();
    CandidateSet::new(entries)
}

/// Greedy (temperature 0) continuation of `prompt` by `horizon` tokens.
pub fn target_greedy_decode(model: &dyn ProbModel, prompt: &[TokenId], horizon: usize) -> Vec<TokenId> {
    let mut seq = prompt.to_vec();
    for _ in 0..horizon {
        let next = argmax(&model.next_dist(&seq));
        seq.push(next);
    }
    seq.split_off(prompt.len())
}

/// Per-row hidden states for a flattened tree.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenRows {
    pub layer: usize,
    pub rows: Vec<NodeId>,
    pub vectors: Vec<Vec<f64>>,
}

impl HiddenRows {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.rows.iter().position(|&r| r == id).map(|i| self.vectors[i].as_slice())
    }
}

/// Evaluates every verification row of `tree` up to `layer` in one batch.
pub fn hidden_states(
    model: &dyn LayeredModel,
    context: &[TokenId],
    tree: &TokenTree,
    layout: &VerifyLayout,
    layer: usize,
) -> Result<HiddenRows> {
    if layer == 0 || layer > model.num_layers() {
        return Err(Error::contract(format!("layer {layer} outside 1..={}", model.num_layers())));
    }
    let prefixes: Vec<Vec<TokenId>> = layout.rows.iter().map(|&id| tree.prefix_for(context, id)).collect();
    let vectors = model.hidden_batch(layer, &prefixes)?;
    Ok(HiddenRows { layer, rows: layout.rows.clone(), vectors })
}
