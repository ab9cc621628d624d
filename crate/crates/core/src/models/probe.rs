use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{LayeredModel, ProbModel, TabularMarkovModel};
use crate::error::{Error, Result};
use crate::tree::TokenId;

/// Synthetic hidden states for a tabular model, so early-exit scoring can run
/// on tabular targets.
///
/// Layer `l` of `D` mixes a fixed random projection `R` of the row's centered
/// log-probabilities with per-context noise:
///
/// ```text
/// h_l = (l/D) * R * (log p - mean(log p)) + (1 - l/D) * xi(context, l)
/// ```
///
/// Deeper layers carry more signal about the final distribution.
#[derive(Clone)]
pub struct TabularProbe {
    model: Arc<TabularMarkovModel>,
    layers: usize,
    dim: usize,
    seed: u64,
    projection: Vec<f64>,
}

impl TabularProbe {
    pub fn new(model: Arc<TabularMarkovModel>, layers: usize, dim: usize, seed: u64) -> Result<Self> {
        if layers == 0 || dim == 0 {
            return Err(Error::config("probe layers and hidden_dim must be positive"));
        }
        let v = model.vocab_size();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (v as f64).sqrt();
        let projection = (0..dim * v)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Ok(Self { model, layers, dim, seed, projection })
    }

    pub fn inner(&self) -> &TabularMarkovModel {
        &self.model
    }

    fn log_probs(&self, prefix: &[TokenId]) -> Vec<f64> {
        self.model.next_dist(prefix).into_iter().map(|p| p.max(1e-300).ln()).collect()
    }
}

impl ProbModel for TabularProbe {
    fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }

    fn next_dist(&self, prefix: &[TokenId]) -> Vec<f64> {
        self.model.next_dist(prefix)
    }
}

impl LayeredModel for TabularProbe {
    fn num_layers(&self) -> usize {
        self.layers
    }

    fn hidden_dim(&self) -> usize {
        self.dim
    }

    fn hidden_at(&self, layer: usize, prefix: &[TokenId]) -> Result<Vec<f64>> {
        if layer == 0 || layer > self.layers {
            return Err(Error::contract(format!("layer {layer} outside 1..={}", self.layers)));
        }
        let v = self.model.vocab_size();
        let mut lp = self.log_probs(prefix);
        let mean = lp.iter().sum::<f64>() / v as f64;
        for x in &mut lp {
            *x -= mean;
        }
        let signal = layer as f64 / self.layers as f64;
        let row = self.model.context_index(prefix) as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        rng.set_stream(row * (self.layers as u64 + 1) + layer as u64);
        Ok(self
            .projection
            .chunks_exact(v)
            .map(|r| {
                let mut s = 0.0;
                for (a, b) in r.iter().zip(&lp) {
                    s += a * b;
                }
                let xi: f64 = StandardNormal.sample(&mut rng);
                signal * s + (1.0 - signal) * xi
            })
            .collect())
    }

    fn final_logits(&self, prefix: &[TokenId]) -> Vec<f64> {
        self.log_probs(prefix)
    }
}
