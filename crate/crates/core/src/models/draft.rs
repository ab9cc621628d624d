use std::sync::Arc;

use super::{ProbModel, TabularConfig, TabularMarkovModel};
use crate::error::{Error, Result};
use crate::tree::TokenId;

/// Draft model derived from a target by mixing in seeded noise:
/// `p_draft = alpha * p_target + (1 - alpha) * p_noise`.
///
/// `alpha = 1` reproduces the target exactly; `alpha = 0` is pure noise.
#[derive(Clone)]
pub struct MixedDraft {
    target: Arc<dyn ProbModel>,
    noise: TabularMarkovModel,
    alpha: f64,
}

impl MixedDraft {
    /// `noise_order` and `noise_sharpness` shape the noise table, which is an
    /// independent tabular model seeded by `seed`.
    pub fn new(
        target: Arc<dyn ProbModel>,
        alpha: f64,
        noise_order: usize,
        noise_sharpness: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config(format!("draft agreement {alpha} outside [0,1]")));
        }
        let noise = TabularMarkovModel::new(TabularConfig {
            vocab_size: target.vocab_size(),
            order: noise_order,
            sharpness: noise_sharpness,
            seed,
        })?;
        Ok(Self { target, noise, alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl ProbModel for MixedDraft {
    fn vocab_size(&self) -> usize {
        self.target.vocab_size()
    }

    fn next_dist(&self, prefix: &[TokenId]) -> Vec<f64> {
        let t = self.target.next_dist(prefix);
        if self.alpha == 1.0 {
            return t;
        }
        let n = self.noise.next_dist(prefix);
        t.iter().zip(n).map(|(&a, b)| self.alpha * a + (1.0 - self.alpha) * b).collect()
    }
}
