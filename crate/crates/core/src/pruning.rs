//! Candidate-normalized early-exit scoring and conservative pruning.
//!
//! For each expanded node `u`, every token of its candidate set is scored,
//! shadows included, and the scores are softmax-normalized at temperature
//! `tau_E` within the set. Shadows only sharpen the comparison; they are never
//! kept. An edge below the threshold is removable unless it is protected by
//! the backbone, by root coverage, or by a kept descendant. A decision that
//! leaves too few nodes or leaves is rejected outright.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{hidden_states, HiddenRows, LayeredModel};
use crate::predictor::EarlyExitPredictor;
use crate::tree::{NodeId, TokenId, TokenTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub threshold: f64,
    pub temperature: f64,
    /// Depth-1 children always kept, by score.
    pub root_keep: usize,
    pub min_keep_frac: f64,
    pub min_leaves: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self { threshold: 0.1, temperature: 1.0, root_keep: 2, min_keep_frac: 0.25, min_leaves: 2 }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("prune.threshold must be in (0,1)"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("prune.temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&self.min_keep_frac) {
            return Err(Error::config("prune.min_keep_frac must be in [0,1]"));
        }
        Ok(())
    }
}

/// Normalized score per child edge, keyed by the child's handle (shadows
/// included).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeScores {
    pub scores: BTreeMap<NodeId, f64>,
}

impl EdgeScores {
    pub fn get(&self, child: NodeId) -> Option<f64> {
        self.scores.get(&child).copied()
    }
}

/// Softmax of `scores / temperature`.
pub fn normalized(scores: &[f64], temperature: f64) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|x| x / sum).collect()
}

pub fn normalize_scores(
    pred: &EarlyExitPredictor,
    hidden: &HiddenRows,
    tree: &TokenTree,
    temperature: f64,
) -> Result<EdgeScores> {
    let mut out = EdgeScores::default();
    for u in tree.real_ids() {
        let node = tree.node(u);
        if node.children().is_empty() {
            continue;
        }
        let cand = node
            .candidates()
            .filter(|c| !c.is_empty())
            .ok_or_else(|| Error::contract(format!("parent {u} has children but no candidate set")))?;
        let h = hidden.get(u).ok_or_else(|| Error::contract(format!("no hidden state for parent {u}")))?;
        let raw: Vec<f64> = cand.tokens().map(|a| pred.score(h, a)).collect::<Result<_>>()?;
        let norm = normalized(&raw, temperature);
        let by_token: BTreeMap<TokenId, f64> = cand.tokens().zip(norm).collect();
        for &c in node.children() {
            let tok = tree.node(c).token;
            let s = by_token
                .get(&tok)
                .ok_or_else(|| Error::contract(format!("child {c} token {tok} not in parent's candidate set")))?;
            out.scores.insert(c, *s);
        }
    }
    Ok(out)
}

fn ranked_children(tree: &TokenTree, u: NodeId, scores: &EdgeScores) -> Vec<NodeId> {
    let mut kids: Vec<NodeId> = tree.real_children(u).collect();
    kids.sort_by(|&a, &b| {
        let (na, nb) = (tree.node(a), tree.node(b));
        let (sa, sb) = (scores.get(a).unwrap_or(0.0), scores.get(b).unwrap_or(0.0));
        sb.total_cmp(&sa).then(nb.reach.total_cmp(&na.reach)).then(na.token.cmp(&nb.token))
    });
    kids
}

/// Per-depth most reliable chain from the root: highest normalized score,
/// then higher reach, then smaller token.
pub fn backbone_path(tree: &TokenTree, scores: &EdgeScores) -> Vec<NodeId> {
    let mut path = vec![tree.root()];
    let mut cur = tree.root();
    while let Some(&next) = ranked_children(tree, cur, scores).first() {
        path.push(next);
        cur = next;
    }
    path
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneDecision {
    pub keep: BTreeSet<NodeId>,
    /// Set when a safeguard vetoed the decision; `keep` is then every node.
    pub rejected: bool,
    pub scores: EdgeScores,
    pub backbone: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub decision: PruneDecision,
    /// Compacted tree `T'`.
    pub tree: TokenTree,
}

fn leaves_within(tree: &TokenTree, keep: &BTreeSet<NodeId>) -> usize {
    keep.iter().filter(|&&id| !tree.real_children(id).any(|c| keep.contains(&c))).count()
}

pub fn prune(tree: &TokenTree, scores: &EdgeScores, cfg: &PruneConfig) -> Result<PruneOutcome> {
    let backbone = backbone_path(tree, scores);
    let mut keep: BTreeSet<NodeId> = backbone.iter().copied().collect();
    keep.extend(ranked_children(tree, tree.root(), scores).into_iter().take(cfg.root_keep));
    for id in tree.real_ids().skip(1) {
        if scores.get(id).is_some_and(|s| s >= cfg.threshold) {
            keep.insert(id);
        }
    }
    let mut closure = BTreeSet::new();
    for &id in &keep {
        let mut cur = Some(id);
        while let Some(c) = cur {
            if !closure.insert(c) {
                break;
            }
            cur = tree.node(c).parent;
        }
    }
    let (rows, leaves) = tree.shape();
    let too_few_nodes = (closure.len() as f64) < cfg.min_keep_frac * rows as f64;
    let too_few_leaves = leaves_within(tree, &closure) < cfg.min_leaves.min(leaves);
    let rejected = too_few_nodes || too_few_leaves;
    if rejected {
        closure = tree.real_ids().collect();
    }
    let pruned = tree.compact(&closure)?;
    Ok(PruneOutcome {
        decision: PruneDecision { keep: closure, rejected, scores: scores.clone(), backbone },
        tree: pruned,
    })
}

/// Hook used by the decode loop to prune each drafted tree before the
/// remaining verification layers.
pub trait Pruner {
    fn prune(&self, context: &[TokenId], tree: &TokenTree) -> Result<PruneOutcome>;
}

/// Scores with an early-exit predictor on the target's layer-`L` states.
pub struct PredictorPruner<'a> {
    pub model: &'a dyn LayeredModel,
    pub predictor: &'a EarlyExitPredictor,
    pub cfg: PruneConfig,
}

impl Pruner for PredictorPruner<'_> {
    fn prune(&self, context: &[TokenId], tree: &TokenTree) -> Result<PruneOutcome> {
        let layout = tree.flatten();
        let hidden = hidden_states(self.model, context, tree, &layout, self.predictor.layer)?;
        let scores = normalize_scores(self.predictor, &hidden, tree, self.cfg.temperature)?;
        prune(tree, &scores, &self.cfg)
    }
}
