use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One persisted measurement: `[rows, leaves, ms]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileTriple(pub usize, pub usize, pub f64);

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cell {
    ms: f64,
    samples: u64,
}

/// Verification latency indexed by tree shape `(|T|, L_T)`.
///
/// Exact hits return the running mean of observations for that shape. Misses
/// return the nearest stored shape by L1 distance (ties toward smaller `|T|`,
/// then smaller `L_T`) scaled by `penalty`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyProfile {
    cells: BTreeMap<(usize, usize), Cell>,
    penalty: f64,
}

impl LatencyProfile {
    pub const DEFAULT_PENALTY: f64 = 1.1;

    pub fn new(penalty: f64) -> Self {
        Self { cells: BTreeMap::new(), penalty }
    }

    pub fn from_triples(triples: &[ProfileTriple], penalty: f64) -> Result<Self> {
        let mut p = Self::new(penalty);
        for &ProfileTriple(rows, leaves, ms) in triples {
            p.seed(rows, leaves, ms)?;
        }
        Ok(p)
    }

    /// Seeds every shape `1 <= leaves <= rows <= max_rows` from `f`.
    pub fn from_fn(max_rows: usize, penalty: f64, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut p = Self::new(penalty);
        for rows in 1..=max_rows {
            for leaves in 1..=rows {
                p.seed(rows, leaves, f(rows, leaves))?;
            }
        }
        Ok(p)
    }

    /// Overwrites a shape with a single offline measurement.
    pub fn seed(&mut self, rows: usize, leaves: usize, ms: f64) -> Result<()> {
        Self::check(rows, leaves, ms)?;
        self.cells.insert((rows, leaves), Cell { ms, samples: 1 });
        Ok(())
    }

    /// Folds an online measurement into the running mean for its shape.
    pub fn record(&mut self, rows: usize, leaves: usize, ms: f64) -> Result<()> {
        Self::check(rows, leaves, ms)?;
        let cell = self.cells.entry((rows, leaves)).or_insert(Cell { ms: 0.0, samples: 0 });
        cell.samples += 1;
        cell.ms += (ms - cell.ms) / cell.samples as f64;
        Ok(())
    }

    fn check(rows: usize, leaves: usize, ms: f64) -> Result<()> {
        if rows == 0 || leaves == 0 {
            return Err(Error::contract("profile shapes must have rows >= 1 and leaves >= 1"));
        }
        if !(ms.is_finite() && ms > 0.0) {
            return Err(Error::contract(format!("profile latency {ms} must be positive and finite")));
        }
        Ok(())
    }

    pub fn penalty(&self) -> f64 {
        self.penalty
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn estimate(&self, (rows, leaves): (usize, usize)) -> Result<f64> {
        if rows == 0 || leaves == 0 {
            return Err(Error::contract("shape components must be >= 1"));
        }
        if let Some(c) = self.cells.get(&(rows, leaves)) {
            return Ok(c.ms);
        }
        let mut best: Option<(usize, (usize, usize), f64)> = None;
        for (&(r, l), c) in &self.cells {
            let dist = r.abs_diff(rows) + l.abs_diff(leaves);
            // BTreeMap order is (rows, leaves) ascending, so strict < keeps
            // the smaller shape on ties
            if best.is_none_or(|(d, _, _)| dist < d) {
                best = Some((dist, (r, l), c.ms));
            }
        }
        best.map(|(_, _, ms)| ms * self.penalty)
            .ok_or_else(|| Error::config("latency profile is empty and has no offline seed"))
    }

    pub fn triples(&self) -> Vec<ProfileTriple> {
        self.cells.iter().map(|(&(r, l), c)| ProfileTriple(r, l, c.ms)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.triples())?)
    }

    pub fn from_json(s: &str, penalty: f64) -> Result<Self> {
        let triples: Vec<ProfileTriple> = serde_json::from_str(s)?;
        Self::from_triples(&triples, penalty)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path, penalty: f64) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, penalty)
    }
}
