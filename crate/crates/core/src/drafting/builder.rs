use std::cmp::Ordering;
use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{calibrate, estimate_gain, DraftConfig, GainCostEstimate, LatencyProfile, ReliabilityState};
use crate::error::{Error, Result};
use crate::models::{draft_candidates, ProbModel};
use crate::tree::{Frontier, FrontierEntry, NodeId, TokenId, TokenTree};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildStep {
    pub node: NodeId,
    pub parent: NodeId,
    pub token: TokenId,
    pub reach: f64,
    pub marginal_cost: f64,
    pub ratio: f64,
    /// Running `G` and `C_cycle` just before this insertion.
    pub gain_before: f64,
    pub cycle_cost_before: f64,
    pub expanded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StopReason {
    FrontierEmpty,
    /// The best remaining ratio could not beat the average gain rate.
    NoImprovement { best_ratio: f64, average_rate: f64 },
    /// Fixed-shape policies stop at their configured size.
    FixedShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildTrace {
    pub steps: Vec<BuildStep>,
    /// Expanded nodes in expansion order (the root first).
    pub expansions: Vec<NodeId>,
    pub draft_ms_per_expansion: f64,
    pub stop: StopReason,
}

impl BuildTrace {
    /// Number of expansions at each tree depth. Expansions at one depth are
    /// independent of each other and can share a batch.
    pub fn expansions_per_depth(&self, tree: &TokenTree) -> Vec<usize> {
        let mut counts: Vec<usize> = Vec::new();
        for &id in &self.expansions {
            let d = tree.node(id).depth;
            if counts.len() <= d {
                counts.resize(d + 1, 0);
            }
            counts[d] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone)]
pub struct BuildOutcome {
    pub tree: TokenTree,
    pub trace: BuildTrace,
    pub estimate: GainCostEstimate,
}

/// Shape after inserting a child under `parent`.
fn shape_after(tree: &TokenTree, parent: NodeId) -> (usize, usize) {
    let (rows, leaves) = tree.shape();
    (rows + 1, if tree.is_leaf(parent) { leaves } else { leaves + 1 })
}

/// Latency increase from inserting `entry`: the verification delta between
/// the two shapes plus one expansion if the new node is expandable, floored
/// at `cfg.cost_floor_ms`.
pub fn marginal_cost(
    entry: &FrontierEntry,
    tree: &TokenTree,
    profile: &LatencyProfile,
    draft_ms: f64,
    cfg: &DraftConfig,
) -> Result<f64> {
    let parent = tree
        .get(entry.parent)
        .ok_or_else(|| Error::Structure(format!("frontier parent {} not in tree", entry.parent)))?;
    let before = profile.estimate(tree.shape())?;
    let after = profile.estimate(shape_after(tree, entry.parent))?;
    let draft = if cfg.expandable(parent.depth + 1, entry.reach) { draft_ms } else { 0.0 };
    Ok((after - before + draft).max(cfg.cost_floor_ms))
}

struct Drafter<'a> {
    context: &'a [TokenId],
    draft: &'a dyn ProbModel,
    rel: &'a ReliabilityState,
}

impl Drafter<'_> {
    /// Expands `u`: stores its candidate set and returns the calibrated
    /// children.
    fn expand(&self, tree: &mut TokenTree, u: NodeId, k: usize) -> Result<Vec<FrontierEntry>> {
        let prefix = tree.prefix_for(self.context, u);
        let cand = draft_candidates(self.draft, &prefix, k)?;
        let parent_reach = tree.node(u).reach;
        let children = cand
            .entries()
            .iter()
            .map(|c| FrontierEntry {
                parent: u,
                token: c.token,
                p_draft: c.p_draft,
                reach: parent_reach * calibrate(c.p_draft, &cand, self.rel),
            })
            .collect();
        tree.set_candidates(u, cand)?;
        Ok(children)
    }
}

fn check_context(context: &[TokenId]) -> Result<TokenId> {
    context.last().copied().ok_or_else(|| Error::contract("context must be non-empty"))
}

/// Ordering of frontier candidates: larger ratio, then larger reach, then
/// smaller token, then smaller parent handle.
fn better(a: (f64, &FrontierEntry), b: (f64, &FrontierEntry)) -> bool {
    let ord = a
        .0
        .total_cmp(&b.0)
        .then(a.1.reach.total_cmp(&b.1.reach))
        .then(b.1.token.cmp(&a.1.token))
        .then(b.1.parent.cmp(&a.1.parent));
    ord == Ordering::Greater
}

/// Greedy gain/cost token-tree construction.
///
/// Starting from the root, repeatedly inserts the frontier node with the
/// largest `reach / marginal_cost` until the frontier is empty or the best
/// ratio is no larger than the tree's average rate `G / C_cycle`. Leftover
/// frontier entries become shadow nodes.
pub fn build_tree(
    context: &[TokenId],
    draft: &dyn ProbModel,
    cfg: &DraftConfig,
    rel: &ReliabilityState,
    profile: &LatencyProfile,
    draft_ms: f64,
) -> Result<BuildOutcome> {
    cfg.validate()?;
    let mut tree = TokenTree::new(check_context(context)?);
    let drafter = Drafter { context, draft, rel };
    let mut frontier = Frontier::new();
    let mut gain = 1.0;
    let mut draft_cost = 0.0;
    let mut steps = Vec::new();
    let mut expansions = vec![NodeId::ROOT];

    for e in drafter.expand(&mut tree, NodeId::ROOT, cfg.k)? {
        frontier.push(e);
    }
    draft_cost += draft_ms;

    let stop = loop {
        if frontier.is_empty() {
            break StopReason::FrontierEmpty;
        }
        let before = profile.estimate(tree.shape())?;
        let cycle = draft_cost + before;
        // Only two post-insert shapes are possible per step.
        let (rows, leaves) = tree.shape();
        let delta_leaf_kept = profile.estimate((rows + 1, leaves))? - before;
        let delta_leaf_added = profile.estimate((rows + 1, leaves + 1))? - before;

        let mut best: Option<(usize, f64, f64)> = None;
        for (i, e) in frontier.entries().iter().enumerate() {
            let depth = tree.node(e.parent).depth + 1;
            let dv = if tree.is_leaf(e.parent) { delta_leaf_kept } else { delta_leaf_added };
            let dd = if cfg.expandable(depth, e.reach) { draft_ms } else { 0.0 };
            let cost = (dv + dd).max(cfg.cost_floor_ms);
            let ratio = e.reach / cost;
            let is_better = match best {
                None => true,
                Some((j, r, _)) => better((ratio, e), (r, &frontier.entries()[j])),
            };
            if is_better {
                best = Some((i, ratio, cost));
            }
        }
        let (idx, ratio, cost) = best.expect("frontier non-empty");
        let average_rate = gain / cycle;
        if ratio <= average_rate {
            break StopReason::NoImprovement { best_ratio: ratio, average_rate };
        }
        let entry = frontier.entries()[idx];
        let node = tree.insert_node(&mut frontier, idx)?;
        let expanded = cfg.expandable(tree.node(node).depth, entry.reach);
        steps.push(BuildStep {
            node,
            parent: entry.parent,
            token: entry.token,
            reach: entry.reach,
            marginal_cost: cost,
            ratio,
            gain_before: gain,
            cycle_cost_before: cycle,
            expanded,
        });
        gain += entry.reach;
        if expanded {
            for e in drafter.expand(&mut tree, node, cfg.k)? {
                frontier.push(e);
            }
            draft_cost += draft_ms;
            expansions.push(node);
        }
    };

    for e in frontier.drain() {
        tree.add_shadow(e.parent, e.token, e.reach)?;
    }
    let estimate = GainCostEstimate::new(gain, draft_cost, profile.estimate(tree.shape())?);
    Ok(BuildOutcome {
        tree,
        trace: BuildTrace { steps, expansions, draft_ms_per_expansion: draft_ms, stop },
        estimate,
    })
}

fn fixed_outcome(
    tree: TokenTree,
    expansions: Vec<NodeId>,
    profile: Option<&LatencyProfile>,
    draft_ms: f64,
) -> Result<BuildOutcome> {
    let gain = estimate_gain(&tree);
    let draft_cost = draft_ms * expansions.len() as f64;
    let verify = match profile {
        Some(p) => p.estimate(tree.shape())?,
        None => 0.0,
    };
    Ok(BuildOutcome {
        estimate: GainCostEstimate::new(gain, draft_cost, verify),
        trace: BuildTrace { steps: Vec::new(), expansions, draft_ms_per_expansion: draft_ms, stop: StopReason::FixedShape },
        tree,
    })
}

/// A single chain of `len` top-1 draft tokens.
pub fn build_chain(
    context: &[TokenId],
    draft: &dyn ProbModel,
    len: usize,
    rel: &ReliabilityState,
    profile: Option<&LatencyProfile>,
    draft_ms: f64,
) -> Result<BuildOutcome> {
    let mut tree = TokenTree::new(check_context(context)?);
    let drafter = Drafter { context, draft, rel };
    let mut expansions = Vec::with_capacity(len);
    let mut tip = NodeId::ROOT;
    for _ in 0..len {
        let child = drafter.expand(&mut tree, tip, 1)?[0];
        expansions.push(tip);
        tip = tree.insert_child(tip, child.token, child.reach)?;
    }
    fixed_outcome(tree, expansions, profile, draft_ms)
}

/// Breadth-first tree with fixed `branching` filled until it holds
/// `budget_rows` verification rows (root included). Candidates cut off by the
/// budget become shadows.
pub fn build_balanced(
    context: &[TokenId],
    draft: &dyn ProbModel,
    branching: usize,
    budget_rows: usize,
    rel: &ReliabilityState,
    profile: Option<&LatencyProfile>,
    draft_ms: f64,
) -> Result<BuildOutcome> {
    if branching == 0 || budget_rows == 0 {
        return Err(Error::config("balanced tree needs branching >= 1 and budget >= 1"));
    }
    let mut tree = TokenTree::new(check_context(context)?);
    let drafter = Drafter { context, draft, rel };
    let mut expansions = Vec::new();
    let mut queue = VecDeque::from([NodeId::ROOT]);
    while tree.node_count() < budget_rows {
        let Some(u) = queue.pop_front() else { break };
        let children = drafter.expand(&mut tree, u, branching.min(draft.vocab_size()))?;
        expansions.push(u);
        for c in children {
            if tree.node_count() < budget_rows {
                queue.push_back(tree.insert_child(u, c.token, c.reach)?);
            } else {
                tree.add_shadow(u, c.token, c.reach)?;
            }
        }
    }
    fixed_outcome(tree, expansions, profile, draft_ms)
}
