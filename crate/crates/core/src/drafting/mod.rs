//! Gain/cost estimation and token-tree construction.

mod builder;
mod profile;

pub use builder::{
    build_balanced, build_chain, build_tree, marginal_cost, BuildOutcome, BuildStep, BuildTrace, StopReason,
};
pub use profile::{LatencyProfile, ProfileTriple};

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::{CandidateSet, TokenTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DraftConfig {
    /// Candidate-set size per expansion.
    pub k: usize,
    pub max_depth: usize,
    /// Nodes with reach below this are never expanded.
    pub b_min: f64,
    pub r_min: f64,
    /// Reliability EMA decay.
    pub beta: f64,
    /// Lower bound on a marginal cost, in ms.
    pub cost_floor_ms: f64,
    /// Moving-average window for per-expansion draft latency.
    pub draft_window: usize,
}

impl Default for DraftConfig {
    fn default() -> Self {
        Self { k: 4, max_depth: 8, b_min: 0.02, r_min: 0.05, beta: 0.9, cost_floor_ms: 0.01, draft_window: 64 }
    }
}

impl DraftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("drafting.k must be at least 1"));
        }
        if self.max_depth == 0 {
            return Err(Error::config("drafting.max_depth must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.b_min) {
            return Err(Error::config("drafting.b_min must be in [0,1)"));
        }
        if !(self.r_min > 0.0 && self.r_min <= 1.0) {
            return Err(Error::config("drafting.r_min must be in (0,1]"));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::config("drafting.beta must be in (0,1)"));
        }
        if !(self.cost_floor_ms > 0.0) {
            return Err(Error::config("drafting.cost_floor_ms must be positive"));
        }
        if self.draft_window == 0 {
            return Err(Error::config("drafting.draft_window must be at least 1"));
        }
        Ok(())
    }

    /// Whether a node at `depth` with estimated `reach` gets its own
    /// candidate set.
    pub fn expandable(&self, depth: usize, reach: f64) -> bool {
        depth < self.max_depth && reach >= self.b_min
    }
}

/// Feedback-driven confidence factor `r` applied to raw draft probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityState {
    pub r: f64,
    pub beta: f64,
    pub r_min: f64,
}

impl ReliabilityState {
    pub fn new(beta: f64, r_min: f64) -> Self {
        Self { r: 1.0, beta, r_min }
    }

    pub fn from_config(cfg: &DraftConfig) -> Self {
        Self::new(cfg.beta, cfg.r_min)
    }

    /// `r <- clamp(beta * r + (1 - beta) * [hit], r_min, 1)`.
    pub fn update(&self, hit: bool) -> Self {
        let target = if hit { 1.0 } else { 0.0 };
        let r = (self.beta * self.r + (1.0 - self.beta) * target).clamp(self.r_min, 1.0);
        Self { r, ..*self }
    }
}

/// Maps a raw draft probability to an estimated target agreement probability.
/// Order-preserving within `cand` for any `r > 0`.
pub fn calibrate(p_draft: f64, cand: &CandidateSet, rel: &ReliabilityState) -> f64 {
    debug_assert!(cand.entries().iter().any(|c| c.p_draft == p_draft), "p_draft not in candidate set");
    (rel.r * p_draft).clamp(0.0, 1.0)
}

pub fn update_reliability(rel: &ReliabilityState, hit: bool) -> ReliabilityState {
    rel.update(hit)
}

/// `1 + sum of reach over non-root, non-shadow nodes`.
pub fn estimate_gain(tree: &TokenTree) -> f64 {
    1.0 + tree.real_ids().skip(1).map(|id| tree.node(id).reach).sum::<f64>()
}

pub fn estimate_verify_cost(profile: &LatencyProfile, shape: (usize, usize)) -> Result<f64> {
    profile.estimate(shape)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainCostEstimate {
    pub gain: f64,
    pub draft_cost: f64,
    pub verify_cost: f64,
    pub cycle_cost: f64,
}

impl GainCostEstimate {
    pub fn new(gain: f64, draft_cost: f64, verify_cost: f64) -> Self {
        Self { gain, draft_cost, verify_cost, cycle_cost: draft_cost + verify_cost }
    }
}

/// Windowed moving average of per-expansion draft latency.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftLatencyAverage {
    window: usize,
    initial_ms: f64,
    samples: VecDeque<f64>,
}

impl DraftLatencyAverage {
    pub fn new(window: usize, initial_ms: f64) -> Self {
        Self { window: window.max(1), initial_ms, samples: VecDeque::new() }
    }

    pub fn record(&mut self, ms: f64) {
        if self.samples.len() == self.window {
            self.samples.pop_front();
        }
        self.samples.push_back(ms);
    }

    pub fn mean(&self) -> f64 {
        if self.samples.is_empty() {
            self.initial_ms
        } else {
            self.samples.iter().sum::<f64>() / self.samples.len() as f64
        }
    }
}
