use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{softmax_in_place, ProbModel};
use crate::error::{Error, Result};
use crate::tree::TokenId;

/// Rows are materialized up front below this many table entries.
const MATERIALIZE_LIMIT: usize = 1 << 21;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularConfig {
    pub vocab_size: usize,
    pub order: usize,
    /// Standard deviation of the row logits; larger is peakier.
    pub sharpness: f64,
    pub seed: u64,
}

/// Order-`m` Markov model with a seeded conditional table of `V^m x V`
/// entries. Prefixes shorter than `m` are left-padded with token 0.
#[derive(Debug, Clone)]
pub struct TabularMarkovModel {
    cfg: TabularConfig,
    rows: usize,
    table: Option<Vec<f64>>,
}

impl TabularMarkovModel {
    pub fn new(cfg: TabularConfig) -> Result<Self> {
        if cfg.vocab_size == 0 {
            return Err(Error::config("tabular model needs a non-empty vocabulary"));
        }
        if cfg.order == 0 {
            return Err(Error::config("tabular model order must be at least 1"));
        }
        if !(cfg.sharpness.is_finite() && cfg.sharpness >= 0.0) {
            return Err(Error::config("tabular sharpness must be finite and non-negative"));
        }
        let rows = u32::try_from(cfg.order)
            .ok()
            .and_then(|m| cfg.vocab_size.checked_pow(m))
            .ok_or_else(|| Error::config("tabular table size overflows"))?;
        let mut model = Self { cfg, rows, table: None };
        if rows.saturating_mul(model.cfg.vocab_size) <= MATERIALIZE_LIMIT {
            let v = model.cfg.vocab_size;
            let mut table = Vec::with_capacity(rows * v);
            for r in 0..rows {
                table.extend(model.generate_row(r));
            }
            model.table = Some(table);
        }
        Ok(model)
    }

    pub fn config(&self) -> &TabularConfig {
        &self.cfg
    }

    pub fn order(&self) -> usize {
        self.cfg.order
    }

    pub fn num_rows(&self) -> usize {
        self.rows
    }

    /// Row index addressed by the last `m` tokens of `prefix`.
    pub fn context_index(&self, prefix: &[TokenId]) -> usize {
        let m = self.cfg.order;
        let v = self.cfg.vocab_size;
        let start = prefix.len().saturating_sub(m);
        let pad = m - (prefix.len() - start);
        let mut idx = 0usize;
        for _ in 0..pad {
            idx *= v;
        }
        for &t in &prefix[start..] {
            idx = idx * v + t as usize;
        }
        idx
    }

    /// Conditional distribution stored at `row`.
    pub fn row(&self, row: usize) -> Vec<f64> {
        match &self.table {
            Some(t) => {
                let v = self.cfg.vocab_size;
                t[row * v..(row + 1) * v].to_vec()
            }
            None => self.generate_row(row),
        }
    }

    fn generate_row(&self, row: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(row as u64);
        let mut logits: Vec<f64> = (0..self.cfg.vocab_size)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * self.cfg.sharpness
            })
            .collect();
        softmax_in_place(&mut logits);
        logits
    }
}

impl ProbModel for TabularMarkovModel {
    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn next_dist(&self, prefix: &[TokenId]) -> Vec<f64> {
        self.row(self.context_index(prefix))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(v: usize, m: usize, seed: u64) -> TabularMarkovModel {
        TabularMarkovModel::new(TabularConfig { vocab_size: v, order: m, sharpness: 2.0, seed }).unwrap()
    }

    #[test]
    fn rows_are_distributions() {
        let t = model(16, 2, 3);
        for r in 0..t.num_rows() {
            let row = t.row(r);
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn lazy_and_materialized_rows_agree() {
        let t = model(16, 2, 9);
        assert!(t.table.is_some());
        for r in [0, 5, 255] {
            assert_eq!(t.row(r), t.generate_row(r));
        }
    }

    #[test]
    fn context_index_pads_left() {
        let t = model(10, 3, 1);
        assert_eq!(t.context_index(&[]), 0);
        assert_eq!(t.context_index(&[4]), 4);
        assert_eq!(t.context_index(&[1, 2, 3]), 123);
        assert_eq!(t.context_index(&[9, 1, 2, 3]), 123);
    }

    #[test]
    fn seeded_reproducible() {
        assert_eq!(model(16, 1, 5).next_dist(&[3]), model(16, 1, 5).next_dist(&[3]));
        assert_ne!(model(16, 1, 5).next_dist(&[3]), model(16, 1, 6).next_dist(&[3]));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(TabularMarkovModel::new(TabularConfig { vocab_size: 0, order: 1, sharpness: 1.0, seed: 0 }).is_err());
        assert!(TabularMarkovModel::new(TabularConfig { vocab_size: 4, order: 0, sharpness: 1.0, seed: 0 }).is_err());
    }
}
