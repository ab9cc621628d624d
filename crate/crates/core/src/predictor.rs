//! Early-exit predictor: a linear probe `W` on layer-`L` hidden states,
//! trained by distillation from the frozen target's final logits.
//!
//! The objective combines a full-vocabulary KD term with a candidate-set term:
//!
//! ```text
//! L      = L_kd + lambda * L_cand
//! L_kd   = tau_kd^2   * sum_t KL(softmax(z_t / tau_kd) || softmax(W h_t / tau_kd))
//! L_cand = tau_cand^2 * sum_t KL(q_T(t) || q_E(t))
//! ```
//!
//! where `q_T`, `q_E` are the same softmaxes restricted to the draft
//! candidate set at position `t`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{draft_candidates, LayeredModel, ProbModel};
use crate::tree::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyExitPredictor {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub layer: usize,
    /// Row-major `V x d`.
    pub weights: Vec<f64>,
}

impl EarlyExitPredictor {
    pub fn zeros(vocab_size: usize, hidden_dim: usize, layer: usize) -> Self {
        Self { vocab_size, hidden_dim, layer, weights: vec![0.0; vocab_size * hidden_dim] }
    }

    /// Zero predictor at the default layer `ceil(D/2)` of `model`.
    pub fn for_model(model: &dyn LayeredModel, layer: Option<usize>) -> Result<Self> {
        let depth = model.num_layers();
        let layer = layer.unwrap_or(depth.div_ceil(2));
        if layer == 0 || layer >= depth {
            return Err(Error::config(format!("predictor layer {layer} must be in 1..{depth}")));
        }
        Ok(Self::zeros(model.vocab_size(), model.hidden_dim(), layer))
    }

    pub fn row(&self, token: TokenId) -> &[f64] {
        let d = self.hidden_dim;
        &self.weights[token as usize * d..(token as usize + 1) * d]
    }

    /// `W[a] . h`.
    pub fn score(&self, h: &[f64], token: TokenId) -> Result<f64> {
        if h.len() != self.hidden_dim {
            return Err(Error::contract(format!("hidden size {} != predictor dim {}", h.len(), self.hidden_dim)));
        }
        if token as usize >= self.vocab_size {
            return Err(Error::contract(format!("token {token} outside vocabulary {}", self.vocab_size)));
        }
        Ok(dot(self.row(token), h))
    }

    /// Scores for every token.
    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        self.weights.chunks_exact(self.hidden_dim).map(|r| dot(r, h)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if p.weights.len() != p.vocab_size * p.hidden_dim {
            return Err(Error::config(format!(
                "checkpoint has {} weights, expected {} x {}",
                p.weights.len(),
                p.vocab_size,
                p.hidden_dim
            )));
        }
        if p.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::config("checkpoint contains non-finite weights"));
        }
        Ok(p)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub tau_kd: f64,
    pub tau_cand: f64,
    pub lambda_cand: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Dataset size when generated from a model.
    pub examples: usize,
    /// Early-exit layer; `None` picks `ceil(D/2)`.
    pub layer: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau_kd: 2.0,
            tau_cand: 1.0,
            lambda_cand: 0.5,
            learning_rate: 0.05,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            examples: 2000,
            layer: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_kd > 0.0 && self.tau_cand > 0.0) {
            return Err(Error::config("training temperatures must be positive"));
        }
        if !(self.lambda_cand >= 0.0) {
            return Err(Error::config("lambda_cand must be non-negative"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    /// Layer-`L` hidden state.
    pub h: Vec<f64>,
    /// Final target logits.
    pub z: Vec<f64>,
    /// Draft candidate tokens at this position.
    pub cand: Vec<TokenId>,
}

/// Log-softmax of `x / tau` over the selected indices.
fn log_softmax_scaled(x: impl Iterator<Item = f64> + Clone, tau: f64) -> Vec<f64> {
    let max = x.clone().fold(f64::NEG_INFINITY, f64::max) / tau;
    let lse = x.clone().map(|v| (v / tau - max).exp()).sum::<f64>().ln() + max;
    x.map(|v| v / tau - lse).collect()
}

/// `KL(p || q)` from log-probabilities, with `p` the teacher.
fn kl_from_logs(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p.iter().zip(log_q).map(|(&lp, &lq)| lp.exp() * (lp - lq)).sum()
}

fn check_batch(pred: &EarlyExitPredictor, batch: &[TrainingExample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::contract("loss needs a non-empty batch"));
    }
    for ex in batch {
        if ex.h.len() != pred.hidden_dim || ex.z.len() != pred.vocab_size {
            return Err(Error::contract("training example dimensions do not match predictor"));
        }
        if ex.cand.iter().any(|&c| c as usize >= pred.vocab_size) {
            return Err(Error::contract("candidate token outside vocabulary"));
        }
    }
    Ok(())
}

pub fn kd_loss(pred: &EarlyExitPredictor, batch: &[TrainingExample], tau: f64) -> Result<f64> {
    check_batch(pred, batch)?;
    let mut total = 0.0;
    for ex in batch {
        let s = pred.logits(&ex.h);
        let lp = log_softmax_scaled(ex.z.iter().copied(), tau);
        let lq = log_softmax_scaled(s.iter().copied(), tau);
        total += kl_from_logs(&lp, &lq);
    }
    Ok(tau * tau * total)
}

pub fn cand_loss(pred: &EarlyExitPredictor, batch: &[TrainingExample], tau: f64) -> Result<f64> {
    check_batch(pred, batch)?;
    let mut total = 0.0;
    for ex in batch {
        if ex.cand.is_empty() {
            return Err(Error::contract("training example has an empty candidate set"));
        }
        let lp = log_softmax_scaled(ex.cand.iter().map(|&c| ex.z[c as usize]), tau);
        let lq = log_softmax_scaled(ex.cand.iter().map(|&c| pred.score(&ex.h, c).expect("checked")), tau);
        total += kl_from_logs(&lp, &lq);
    }
    Ok(tau * tau * total)
}

pub fn total_loss(pred: &EarlyExitPredictor, batch: &[TrainingExample], cfg: &TrainConfig) -> Result<f64> {
    let kd = kd_loss(pred, batch, cfg.tau_kd)?;
    if cfg.lambda_cand == 0.0 {
        return Ok(kd);
    }
    Ok(kd + cfg.lambda_cand * cand_loss(pred, batch, cfg.tau_cand)?)
}

/// Analytic gradient of [`total_loss`] with respect to `W`, row-major.
///
/// For a tempered KL with teacher `p` and student `softmax(s / tau)`, the
/// gradient of `tau^2 * KL` with respect to `s` is `tau * (q - p)`.
pub fn loss_gradient(pred: &EarlyExitPredictor, batch: &[TrainingExample], cfg: &TrainConfig) -> Result<Vec<f64>> {
    check_batch(pred, batch)?;
    let d = pred.hidden_dim;
    let mut grad = vec![0.0; pred.weights.len()];
    let mut g = vec![0.0; pred.vocab_size];
    for ex in batch {
        let s = pred.logits(&ex.h);
        let lp = log_softmax_scaled(ex.z.iter().copied(), cfg.tau_kd);
        let lq = log_softmax_scaled(s.iter().copied(), cfg.tau_kd);
        for (a, ga) in g.iter_mut().enumerate() {
            *ga = cfg.tau_kd * (lq[a].exp() - lp[a].exp());
        }
        if cfg.lambda_cand != 0.0 {
            let lp = log_softmax_scaled(ex.cand.iter().map(|&c| ex.z[c as usize]), cfg.tau_cand);
            let lq = log_softmax_scaled(ex.cand.iter().map(|&c| s[c as usize]), cfg.tau_cand);
            for (i, &c) in ex.cand.iter().enumerate() {
                g[c as usize] += cfg.lambda_cand * cfg.tau_cand * (lq[i].exp() - lp[i].exp());
            }
        }
        for (a, &ga) in g.iter().enumerate() {
            if ga == 0.0 {
                continue;
            }
            for (w, &x) in grad[a * d..(a + 1) * d].iter_mut().zip(&ex.h) {
                *w += ga * x;
            }
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub epoch: usize,
    /// Per-example means over the full dataset.
    pub total: f64,
    pub kd: f64,
    pub cand: f64,
}

fn evaluate(pred: &EarlyExitPredictor, data: &[TrainingExample], cfg: &TrainConfig, epoch: usize) -> Result<LossPoint> {
    let n = data.len() as f64;
    let kd = kd_loss(pred, data, cfg.tau_kd)? / n;
    let cand = cand_loss(pred, data, cfg.tau_cand)? / n;
    Ok(LossPoint { epoch, total: kd + cfg.lambda_cand * cand, kd, cand })
}

/// Mini-batch gradient descent on `W` only. Each step follows the mean
/// gradient over its batch. Returns the trained predictor and one loss point
/// per epoch, starting with the untrained loss at epoch 0.
pub fn train(
    pred: &EarlyExitPredictor,
    dataset: &[TrainingExample],
    cfg: &TrainConfig,
) -> Result<(EarlyExitPredictor, Vec<LossPoint>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("training needs a non-empty dataset"));
    }
    let mut w = pred.clone();
    let mut curve = vec![evaluate(&w, dataset, cfg, 0)?];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainingExample> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let grad = loss_gradient(&w, &batch, cfg)?;
            let scale = cfg.learning_rate / batch.len() as f64;
            for (x, g) in w.weights.iter_mut().zip(grad) {
                *x -= scale * g;
            }
            step += 1;
            if w.weights.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence { epoch, step, loss: f64::NAN });
            }
        }
        let point = evaluate(&w, dataset, cfg, epoch)?;
        if !point.total.is_finite() {
            return Err(Error::Divergence { epoch, step, loss: point.total });
        }
        curve.push(point);
    }
    Ok((w, curve))
}

/// Records `(h^L, z, C)` at seeded random prefixes of `target`, with the
/// candidate set drafted exactly as at inference.
pub fn generate_dataset(
    target: &dyn LayeredModel,
    draft: &dyn ProbModel,
    layer: usize,
    k: usize,
    examples: usize,
    prefix_len: usize,
    seed: u64,
) -> Result<Vec<TrainingExample>> {
    let v = target.vocab_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..examples)
        .map(|_| {
            let prefix: Vec<TokenId> = (0..prefix_len.max(1)).map(|_| rng.random_range(0..v) as TokenId).collect();
            Ok(TrainingExample {
                h: target.hidden_at(layer, &prefix)?,
                z: target.final_logits(&prefix),
                cand: draft_candidates(draft, &prefix, k)?.tokens().collect(),
            })
        })
        .collect()
}

/// Fraction of examples where the predictor's best candidate equals the
/// target's best candidate (both restricted to the candidate set).
pub fn candidate_agreement(pred: &EarlyExitPredictor, data: &[TrainingExample]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let pick = |scores: &dyn Fn(TokenId) -> f64, cand: &[TokenId]| -> TokenId {
        let mut best = cand[0];
        for &c in &cand[1..] {
            let (sc, sb) = (scores(c), scores(best));
            if sc > sb || (sc == sb && c < best) {
                best = c;
            }
        }
        best
    };
    let hits = data
        .iter()
        .filter(|ex| {
            let s = pred.logits(&ex.h);
            pick(&|c| s[c as usize], &ex.cand) == pick(&|c| ex.z[c as usize], &ex.cand)
        })
        .count();
    hits as f64 / data.len() as f64
}
