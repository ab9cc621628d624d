//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use std::collections::BTreeMap;

use flashspec::drafting::{build_tree, BuildOutcome, DraftConfig, LatencyProfile, ReliabilityState, StopReason};
use flashspec::models::{ProbModel, TabularConfig, TabularMarkovModel};
use flashspec::tree::{NodeId, TokenId, TokenTree};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Plain argmax with ties to the smaller index.
pub fn naive_argmax(d: &[f64]) -> TokenId {
    let mut best = 0;
    for i in 1..d.len() {
        if d[i] > d[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Autoregressive reference: one argmax per step.
pub fn ar_oracle(model: &dyn ProbModel, prompt: &[TokenId], horizon: usize) -> Vec<TokenId> {
    let mut ctx = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..horizon {
        let t = naive_argmax(&model.next_dist(&ctx));
        ctx.push(t);
        out.push(t);
    }
    out
}

/// Top-k by full sort: descending probability, ties to smaller token.
pub fn topk_oracle(d: &[f64], k: usize) -> Vec<(TokenId, f64)> {
    let mut all: Vec<(TokenId, f64)> = d.iter().enumerate().map(|(i, &p)| (i as TokenId, p)).collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Brute-force ancestor-or-self test by walking parents.
pub fn is_ancestor_walk(tree: &TokenTree, anc: NodeId, id: NodeId) -> bool {
    let mut cur = Some(id);
    while let Some(c) = cur {
        if c == anc {
            return true;
        }
        cur = tree.node(c).parent;
    }
    false
}

/// Random tree with `n` real nodes and some shadows.
pub fn random_tree(rng: &mut impl Rng, n: usize, vocab: u32) -> TokenTree {
    let mut t = TokenTree::new(0);
    let mut real = vec![NodeId::ROOT];
    let mut attempts = 0;
    while real.len() < n && attempts < 10 * n + 100 {
        attempts += 1;
        let parent = real[rng.random_range(0..real.len())];
        let token = rng.random_range(0..vocab);
        let reach = t.node(parent).reach * rng.random_range(0.05..1.0);
        if t.node(parent).children().iter().any(|&c| t.node(c).token == token) {
            continue;
        }
        if rng.random_bool(0.2) {
            t.add_shadow(parent, token, reach).unwrap();
        } else {
            real.push(t.insert_child(parent, token, reach).unwrap());
        }
    }
    t
}

/// Affine profile `a + b * rows + c * leaves` over every shape up to
/// `max_rows`.
pub fn affine_profile(a: f64, b: f64, c: f64, max_rows: usize) -> LatencyProfile {
    LatencyProfile::from_fn(max_rows, 1.1, |r, l| a + b * r as f64 + c * l as f64).unwrap()
}

/// Small greedy-construction instance with at most `k + k^2` reachable
/// candidates (depth 2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyInstance {
    pub id: usize,
    pub model_seed: u64,
    pub vocab_size: usize,
    pub sharpness: f64,
    pub k: usize,
    pub b_min: f64,
    pub draft_ms: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub context: Vec<TokenId>,
    /// Objective of the greedy tree and of the exhaustive optimum when the
    /// fixture was generated.
    pub greedy_objective: f64,
    pub optimum: f64,
    pub greedy_nodes: usize,
}

pub const SUITE_BUDGET: usize = 6;
pub const SUITE_DEPTH: usize = 2;

impl GreedyInstance {
    pub fn model(&self) -> TabularMarkovModel {
        TabularMarkovModel::new(TabularConfig {
            vocab_size: self.vocab_size,
            order: 1,
            sharpness: self.sharpness,
            seed: self.model_seed,
        })
        .unwrap()
    }

    pub fn config(&self) -> DraftConfig {
        DraftConfig { k: self.k, max_depth: SUITE_DEPTH, b_min: self.b_min, ..Default::default() }
    }

    pub fn profile(&self) -> LatencyProfile {
        affine_profile(self.a, self.b, self.c, 1 + self.k + self.k * self.k)
    }

    pub fn verify_ms(&self, rows: usize, leaves: usize) -> f64 {
        self.a + self.b * rows as f64 + self.c * leaves as f64
    }

    pub fn build(&self) -> BuildOutcome {
        let rel = ReliabilityState::new(0.9, 0.05);
        build_tree(&self.context, &self.model(), &self.config(), &rel, &self.profile(), self.draft_ms).unwrap()
    }
}

/// Candidate node in the oracle's own enumeration: depth-1 nodes are
/// `0..k`; node `i`'s children are listed in `children[i]`.
pub struct CandidateSpace {
    pub first: Vec<(TokenId, f64)>,
    /// Present only for expandable depth-1 nodes.
    pub second: Vec<Option<Vec<(TokenId, f64)>>>,
}

pub fn candidate_space(inst: &GreedyInstance) -> CandidateSpace {
    let model = inst.model();
    let first = topk_oracle(&model.next_dist(&inst.context), inst.k);
    let second = first
        .iter()
        .map(|&(tok, p)| {
            // depth 1 < max depth 2, so only the reach floor matters
            (p >= inst.b_min).then(|| {
                let mut ctx = inst.context.clone();
                ctx.push(tok);
                topk_oracle(&model.next_dist(&ctx), inst.k)
            })
        })
        .collect();
    CandidateSpace { first, second }
}

/// Best `G / C` over every ancestor-closed subtree with at most `budget`
/// non-root nodes.
pub fn exhaustive_optimum(inst: &GreedyInstance, budget: usize) -> f64 {
    let space = candidate_space(inst);
    let k = space.first.len();
    let mut best = f64::NEG_INFINITY;
    for mask1 in 0u32..(1 << k) {
        let chosen: Vec<usize> = (0..k).filter(|i| mask1 >> i & 1 == 1).collect();
        if chosen.len() > budget {
            continue;
        }
        // per chosen depth-1 node, every subset of its children
        let child_counts: Vec<usize> =
            chosen.iter().map(|&i| space.second[i].as_ref().map_or(0, |c| c.len())).collect();
        let total_bits: usize = child_counts.iter().sum();
        for mask2 in 0u64..(1 << total_bits) {
            let n2 = mask2.count_ones() as usize;
            if chosen.len() + n2 > budget {
                continue;
            }
            let mut gain = 1.0;
            let mut expansions = 1;
            let mut leaves = 0;
            let mut bit = 0;
            for (j, &i) in chosen.iter().enumerate() {
                let p1 = space.first[i].1;
                gain += p1;
                if space.second[i].is_some() {
                    expansions += 1;
                }
                let mut kids = 0;
                for c in 0..child_counts[j] {
                    if mask2 >> (bit + c) & 1 == 1 {
                        gain += p1 * space.second[i].as_ref().unwrap()[c].1;
                        kids += 1;
                    }
                }
                bit += child_counts[j];
                leaves += if kids == 0 { 1 } else { kids };
            }
            let rows = 1 + chosen.len() + n2;
            let leaves = leaves.max(1);
            let cost = inst.draft_ms * expansions as f64 + inst.verify_ms(rows, leaves);
            best = best.max(gain / cost);
        }
    }
    best
}

pub fn greedy_objective(out: &BuildOutcome) -> f64 {
    out.estimate.gain / out.estimate.cycle_cost
}

/// Replays a construction from scratch with the oracle's own candidate
/// space and cost rule. Checks that every insertion was the best entry at its
/// instant (ratio, then reach, then smaller token) and beat the average rate,
/// and that the stopping inequality holds at exit. Returns an error message
/// on the first violation.
pub fn replay_greedy(inst: &GreedyInstance, out: &BuildOutcome) -> Result<(), String> {
    let space = candidate_space(inst);
    let tree = &out.tree;
    // frontier keyed by token path
    let mut frontier: BTreeMap<Vec<TokenId>, f64> = space.first.iter().map(|&(t, p)| (vec![t], p)).collect();
    let mut inserted: Vec<Vec<TokenId>> = Vec::new();
    let mut gain = 1.0;
    let mut expansions = 1usize;
    let floor = inst.config().cost_floor_ms;
    let shape = |ins: &[Vec<TokenId>]| {
        let rows = 1 + ins.len();
        let leaves = ins.iter().filter(|p| !ins.iter().any(|q| q.len() == p.len() + 1 && q.starts_with(p))).count();
        (rows, leaves.max(1))
    };
    let ratio_of = |ins: &[Vec<TokenId>], path: &[TokenId], reach: f64| {
        let before = shape(ins);
        let mut with = ins.to_vec();
        with.push(path.to_vec());
        let after = shape(&with);
        let expandable = path.len() < SUITE_DEPTH && reach >= inst.b_min;
        let dv = inst.verify_ms(after.0, after.1) - inst.verify_ms(before.0, before.1);
        let cost = (dv + if expandable { inst.draft_ms } else { 0.0 }).max(floor);
        reach / cost
    };
    for (n, step) in out.trace.steps.iter().enumerate() {
        let chosen = tree.path_tokens(step.node);
        let cycle = inst.draft_ms * expansions as f64 + {
            let (r, l) = shape(&inserted);
            inst.verify_ms(r, l)
        };
        let avg = gain / cycle;
        let mut best: Option<(f64, f64, Vec<TokenId>)> = None;
        for (path, &reach) in &frontier {
            let r = ratio_of(&inserted, path, reach);
            let better = match &best {
                None => true,
                Some((br, bre, bp)) => {
                    r > *br || (r == *br && (reach > *bre || (reach == *bre && path.last() < bp.last())))
                }
            };
            if better {
                best = Some((r, reach, path.clone()));
            }
        }
        let (br, _, bp) = best.ok_or(format!("step {n}: builder inserted from an empty frontier"))?;
        let reach = frontier[&chosen];
        let r = ratio_of(&inserted, &chosen, reach);
        if (r - br).abs() > 1e-12 * br.abs().max(1.0) {
            return Err(format!("step {n}: chose {chosen:?} with ratio {r}, best was {bp:?} with {br}"));
        }
        if !(r > avg) {
            return Err(format!("step {n}: inserted with ratio {r} <= average rate {avg}"));
        }
        frontier.remove(&chosen);
        gain += reach;
        if chosen.len() < SUITE_DEPTH && reach >= inst.b_min {
            expansions += 1;
            let i = space.first.iter().position(|&(t, _)| t == chosen[0]).unwrap();
            for &(t, p) in space.second[i].as_ref().unwrap() {
                frontier.insert(vec![chosen[0], t], reach * p);
            }
        }
        inserted.push(chosen);
    }
    let cycle = inst.draft_ms * expansions as f64 + {
        let (r, l) = shape(&inserted);
        inst.verify_ms(r, l)
    };
    let avg = gain / cycle;
    match out.trace.stop {
        StopReason::FrontierEmpty => {
            if !frontier.is_empty() {
                return Err("stopped with frontier empty but the replay frontier is not".into());
            }
        }
        StopReason::NoImprovement { .. } => {
            for (path, &reach) in &frontier {
                let r = ratio_of(&inserted, path, reach);
                if r > avg {
                    return Err(format!("stop rule violated: {path:?} has ratio {r} > {avg}"));
                }
            }
        }
        StopReason::FixedShape => return Err("greedy builder reported a fixed shape".into()),
    }
    if (gain - out.estimate.gain).abs() > 1e-9 || (cycle - out.estimate.cycle_cost).abs() > 1e-6 {
        return Err(format!(
            "final estimate mismatch: replay G={gain} C={cycle}, builder G={} C={}",
            out.estimate.gain, out.estimate.cycle_cost
        ));
    }
    Ok(())
}

pub fn load_suite() -> Vec<GreedyInstance> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/greedy_suite.json");
    serde_json::from_str(&std::fs::read_to_string(path).expect("greedy suite fixture")).unwrap()
}

/// Samples a path through `tree` by drawing each target token from its
/// distribution, accepting while it matches a child. Returns tokens emitted.
pub fn sample_cycle(target: &dyn ProbModel, context: &[TokenId], tree: &TokenTree, rng: &mut impl Rng) -> usize {
    let mut cur = NodeId::ROOT;
    let mut emitted = 1;
    loop {
        let d = target.next_dist(&tree.prefix_for(context, cur));
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut tok = (d.len() - 1) as TokenId;
        for (i, p) in d.iter().enumerate() {
            acc += p;
            if u < acc {
                tok = i as TokenId;
                break;
            }
        }
        match tree.child_with_token(cur, tok).filter(|&c| !tree.node(c).shadow) {
            Some(c) => {
                emitted += 1;
                cur = c;
            }
            None => return emitted,
        }
    }
}
