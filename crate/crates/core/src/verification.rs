//! Greedy tree verification and the speculative decode loop.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::drafting::{
    build_balanced, build_chain, build_tree, BuildOutcome, DraftConfig, DraftLatencyAverage, LatencyProfile,
    ReliabilityState,
};
use crate::error::{Error, Result};
use crate::models::{argmax, ProbModel};
use crate::pruning::{PruneDecision, Pruner};
use crate::tree::{NodeId, TokenId, TokenTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    /// Accepted nodes, starting with the root.
    pub accepted_path: Vec<NodeId>,
    pub accepted_len: usize,
    pub fallback: TokenId,
    /// Accepted tokens followed by the fallback.
    pub emitted: Vec<TokenId>,
    /// Target argmax for every verification row.
    pub per_row_argmax: BTreeMap<NodeId, TokenId>,
    /// Deepest accepted node; the fallback is drawn there.
    pub stop_node: NodeId,
}

pub fn verify_tree(target: &dyn ProbModel, context: &[TokenId], tree: &TokenTree) -> Result<VerificationResult> {
    if context.is_empty() {
        return Err(Error::contract("context must be non-empty"));
    }
    let layout = tree.flatten();
    let per_row_argmax: BTreeMap<NodeId, TokenId> = layout
        .rows
        .iter()
        .map(|&id| (id, argmax(&target.next_dist(&tree.prefix_for(context, id)))))
        .collect();
    let mut path = vec![tree.root()];
    let mut cur = tree.root();
    let mut emitted = Vec::new();
    loop {
        let want = per_row_argmax[&cur];
        match tree.child_with_token(cur, want) {
            Some(next) if !tree.node(next).shadow => {
                emitted.push(want);
                path.push(next);
                cur = next;
            }
            _ => {
                emitted.push(want);
                return Ok(VerificationResult {
                    accepted_len: path.len() - 1,
                    accepted_path: path,
                    fallback: want,
                    emitted,
                    per_row_argmax,
                    stop_node: cur,
                });
            }
        }
    }
}

/// Tree shape policy for each cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreePolicy {
    /// No drafting; one target pass per token.
    RootOnly,
    Chain { len: usize },
    Balanced { branching: usize, budget_rows: usize },
    Greedy(DraftConfig),
}

/// Simulated cost of a finished cycle, fed back into the drafter's latency
/// statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleMeasurement {
    /// Mean draft latency per expansion this cycle, if anything was drafted.
    pub draft_ms_per_expansion: Option<f64>,
    /// Verification latency for the tree shape as drafted.
    pub verify_ms: f64,
}

pub trait CycleClock {
    fn measure(&self, record: &CycleRecord) -> Result<CycleMeasurement>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CycleRecord {
    pub index: usize,
    pub context_len: usize,
    /// Shape as drafted.
    pub rows: usize,
    pub leaves: usize,
    /// Shape actually verified past the early-exit layer.
    pub rows_after_prune: usize,
    pub leaves_after_prune: usize,
    pub max_depth: usize,
    pub expansions_per_depth: Vec<usize>,
    pub accepted_len: usize,
    /// Accepted length had the drafted tree been verified in full.
    pub unpruned_accepted_len: Option<usize>,
    /// Tokens appended to the output (after truncation at the horizon).
    pub emitted: usize,
    pub reliability: f64,
    pub hit: Option<bool>,
    pub estimated_gain: f64,
    pub estimated_cycle_ms: f64,
    pub prune: Option<PruneDecision>,
    #[serde(skip)]
    pub tree: Option<TokenTree>,
    #[serde(skip)]
    pub pruned_tree: Option<TokenTree>,
}

pub struct DecodeOptions<'a> {
    pub policy: TreePolicy,
    pub reliability: ReliabilityState,
    /// Pinned reliability is never updated.
    pub freeze_reliability: bool,
    pub profile: LatencyProfile,
    pub draft_ms_init: f64,
    pub draft_window: usize,
    pub pruner: Option<&'a dyn Pruner>,
    pub clock: Option<&'a dyn CycleClock>,
    /// Also verify the unpruned tree for accounting.
    pub replay_unpruned: bool,
    pub record_trees: bool,
}

impl<'a> DecodeOptions<'a> {
    pub fn new(policy: TreePolicy, profile: LatencyProfile) -> Self {
        let rel = match &policy {
            TreePolicy::Greedy(cfg) => ReliabilityState::from_config(cfg),
            _ => ReliabilityState::from_config(&DraftConfig::default()),
        };
        let window = match &policy {
            TreePolicy::Greedy(cfg) => cfg.draft_window,
            _ => DraftConfig::default().draft_window,
        };
        Self {
            policy,
            reliability: rel,
            freeze_reliability: false,
            profile,
            draft_ms_init: 1.0,
            draft_window: window,
            pruner: None,
            clock: None,
            replay_unpruned: false,
            record_trees: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub tokens: Vec<TokenId>,
    pub cycles: Vec<CycleRecord>,
    pub reliability: ReliabilityState,
    pub profile: LatencyProfile,
}

fn draft_cycle(
    opts: &DecodeOptions<'_>,
    context: &[TokenId],
    draft: &dyn ProbModel,
    rel: &ReliabilityState,
    profile: &LatencyProfile,
    draft_ms: f64,
) -> Result<BuildOutcome> {
    match &opts.policy {
        TreePolicy::RootOnly => build_chain(context, draft, 0, rel, Some(profile), draft_ms),
        TreePolicy::Chain { len } => build_chain(context, draft, *len, rel, Some(profile), draft_ms),
        TreePolicy::Balanced { branching, budget_rows } => {
            build_balanced(context, draft, *branching, *budget_rows, rel, Some(profile), draft_ms)
        }
        TreePolicy::Greedy(cfg) => build_tree(context, draft, cfg, rel, profile, draft_ms),
    }
}

/// Runs speculative cycles until `horizon` tokens are emitted. Each cycle
/// drafts a tree, optionally prunes it, verifies it against `target`, and
/// feeds the outcome back into the reliability factor and, through `clock`,
/// into the latency profile and the draft latency average.
pub fn run_decode(
    target: &dyn ProbModel,
    draft: &dyn ProbModel,
    prompt: &[TokenId],
    horizon: usize,
    mut opts: DecodeOptions<'_>,
) -> Result<DecodeOutput> {
    if horizon == 0 {
        return Err(Error::contract("horizon must be at least 1"));
    }
    if prompt.is_empty() {
        return Err(Error::contract("prompt must be non-empty"));
    }
    if let TreePolicy::Greedy(cfg) = &opts.policy {
        cfg.validate()?;
    }
    let mut context = prompt.to_vec();
    let mut tokens = Vec::with_capacity(horizon);
    let mut cycles = Vec::new();
    let mut rel = opts.reliability;
    let mut draft_avg = DraftLatencyAverage::new(opts.draft_window, opts.draft_ms_init);
    let mut profile = std::mem::replace(&mut opts.profile, LatencyProfile::new(1.0));

    while tokens.len() < horizon {
        let built = draft_cycle(&opts, &context, draft, &rel, &profile, draft_avg.mean())?;
        let drafted = built.tree;
        let (rows, leaves) = drafted.shape();
        let (verified, decision) = match opts.pruner {
            Some(p) if rows > 1 => {
                let out = p.prune(&context, &drafted)?;
                (out.tree, Some(out.decision))
            }
            _ => (drafted.clone(), None),
        };
        let result = verify_tree(target, &context, &verified)?;
        let unpruned_accepted_len = if opts.replay_unpruned {
            Some(if decision.is_some() { verify_tree(target, &context, &drafted)?.accepted_len } else { result.accepted_len })
        } else {
            None
        };
        let hit = verified.node(result.stop_node).candidates().map(|c| c.contains(result.fallback));
        let take = result.emitted.len().min(horizon - tokens.len());
        tokens.extend_from_slice(&result.emitted[..take]);
        context.extend_from_slice(&result.emitted[..take]);

        let (rows_after_prune, leaves_after_prune) = verified.shape();
        let record = CycleRecord {
            index: cycles.len(),
            context_len: context.len() - take,
            rows,
            leaves,
            rows_after_prune,
            leaves_after_prune,
            max_depth: drafted.max_depth(),
            expansions_per_depth: built.trace.expansions_per_depth(&drafted),
            accepted_len: result.accepted_len,
            unpruned_accepted_len,
            emitted: take,
            reliability: rel.r,
            hit,
            estimated_gain: built.estimate.gain,
            estimated_cycle_ms: built.estimate.cycle_cost,
            prune: decision,
            tree: opts.record_trees.then(|| drafted.clone()),
            pruned_tree: opts.record_trees.then_some(verified),
        };
        if let (Some(h), false) = (hit, opts.freeze_reliability) {
            rel = rel.update(h);
        }
        if let Some(clock) = opts.clock {
            let m = clock.measure(&record)?;
            profile.record(rows, leaves, m.verify_ms)?;
            if let Some(d) = m.draft_ms_per_expansion {
                draft_avg.record(d);
            }
        }
        cycles.push(record);
    }
    Ok(DecodeOutput { tokens, cycles, reliability: rel, profile })
}
