use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{softmax_in_place, LayeredModel, ProbModel};
use crate::error::{Error, Result};
use crate::tree::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayeredConfig {
    pub vocab_size: usize,
    /// Number of trailing tokens embedded as input.
    pub context: usize,
    pub layers: usize,
    pub hidden_dim: usize,
    pub logit_scale: f64,
    pub seed: u64,
}

/// A small residual tanh network over an embedding of the last `m` tokens:
///
/// ```text
/// h_0 = (1/sqrt(m)) * sum_j E_j[x_{t-j}]
/// h_l = h_{l-1} + tanh(A_l h_{l-1} + b_l)      l = 1..=D
/// z   = s * U h_D
/// ```
///
/// Weights are unit-variance Gaussians scaled by `1/sqrt(d)`.
#[derive(Debug, Clone)]
pub struct LayeredTargetModel {
    cfg: LayeredConfig,
    /// `m` tables of `V x d`.
    embed: Vec<f64>,
    /// `D` matrices of `d x d`.
    weights: Vec<f64>,
    bias: Vec<f64>,
    /// `V x d`.
    output: Vec<f64>,
}

impl LayeredTargetModel {
    pub fn new(cfg: LayeredConfig) -> Result<Self> {
        if cfg.vocab_size == 0 || cfg.context == 0 || cfg.layers == 0 || cfg.hidden_dim == 0 {
            return Err(Error::config("layered model dimensions must all be positive"));
        }
        if !cfg.logit_scale.is_finite() {
            return Err(Error::config("layered model logit_scale must be finite"));
        }
        let (v, m, depth, d) = (cfg.vocab_size, cfg.context, cfg.layers, cfg.hidden_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let scale = 1.0 / (d as f64).sqrt();
        let mut draw = |n: usize, s: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * s
                })
                .collect()
        };
        let embed = draw(m * v * d, 1.0);
        let weights = draw(depth * d * d, scale);
        let bias = draw(depth * d, 0.1);
        let output = draw(v * d, scale);
        Ok(Self { cfg, embed, weights, bias, output })
    }

    pub fn config(&self) -> &LayeredConfig {
        &self.cfg
    }

    fn input(&self, prefix: &[TokenId]) -> Vec<f64> {
        let (v, m, d) = (self.cfg.vocab_size, self.cfg.context, self.cfg.hidden_dim);
        let mut h = vec![0.0; d];
        let start = prefix.len() as isize - m as isize;
        for j in 0..m {
            let pos = start + j as isize;
            let tok = if pos < 0 { 0 } else { prefix[pos as usize] as usize };
            let row = &self.embed[(j * v + tok) * d..(j * v + tok + 1) * d];
            for (acc, &e) in h.iter_mut().zip(row) {
                *acc += e;
            }
        }
        let norm = 1.0 / (m as f64).sqrt();
        for x in &mut h {
            *x *= norm;
        }
        h
    }

    /// Applies layer `l` (0-based) to `h` in place.
    fn apply_layer(&self, l: usize, h: &mut [f64]) {
        let d = self.cfg.hidden_dim;
        let a = &self.weights[l * d * d..(l + 1) * d * d];
        let b = &self.bias[l * d..(l + 1) * d];
        let pre: Vec<f64> = (0..d)
            .map(|i| {
                let mut s = b[i];
                for (w, x) in a[i * d..(i + 1) * d].iter().zip(h.iter()) {
                    s += w * x;
                }
                s
            })
            .collect();
        for (x, p) in h.iter_mut().zip(pre) {
            *x += p.tanh();
        }
    }

    /// Output projection of a final hidden state.
    pub fn project(&self, h: &[f64]) -> Vec<f64> {
        let d = self.cfg.hidden_dim;
        self.output
            .chunks_exact(d)
            .map(|row| {
                let mut s = 0.0;
                for (u, x) in row.iter().zip(h) {
                    s += u * x;
                }
                s * self.cfg.logit_scale
            })
            .collect()
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.cfg.layers {
            return Err(Error::contract(format!("layer {layer} outside 1..={}", self.cfg.layers)));
        }
        Ok(())
    }
}

impl ProbModel for LayeredTargetModel {
    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn next_dist(&self, prefix: &[TokenId]) -> Vec<f64> {
        let mut z = self.final_logits(prefix);
        softmax_in_place(&mut z);
        z
    }
}

impl LayeredModel for LayeredTargetModel {
    fn num_layers(&self) -> usize {
        self.cfg.layers
    }

    fn hidden_dim(&self) -> usize {
        self.cfg.hidden_dim
    }

    fn hidden_at(&self, layer: usize, prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.check_layer(layer)?;
        let mut h = self.input(prefix);
        for l in 0..layer {
            self.apply_layer(l, &mut h);
        }
        Ok(h)
    }

    fn final_logits(&self, prefix: &[TokenId]) -> Vec<f64> {
        let h = self.hidden_at(self.cfg.layers, prefix).expect("final layer in range");
        self.project(&h)
    }

    /// Layer-major evaluation of the whole batch.
    fn hidden_batch(&self, layer: usize, prefixes: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>> {
        self.check_layer(layer)?;
        let mut batch: Vec<Vec<f64>> = prefixes.iter().map(|p| self.input(p)).collect();
        for l in 0..layer {
            for h in &mut batch {
                self.apply_layer(l, h);
            }
        }
        Ok(batch)
    }
}
