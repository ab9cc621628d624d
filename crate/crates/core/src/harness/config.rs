use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::drafting::DraftConfig;
use crate::error::{Error, Result};
use crate::predictor::TrainConfig;
use crate::pruning::PruneConfig;
use crate::simulator::{preset, HardwareConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    FlashAr,
    ChainSd,
    BalancedTree,
    Lever,
    LeverNoprune,
}

impl PolicyName {
    pub const ALL: [PolicyName; 5] =
        [PolicyName::FlashAr, PolicyName::ChainSd, PolicyName::BalancedTree, PolicyName::Lever, PolicyName::LeverNoprune];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyName::FlashAr => "flash_ar",
            PolicyName::ChainSd => "chain_sd",
            PolicyName::BalancedTree => "balanced_tree",
            PolicyName::Lever => "lever",
            PolicyName::LeverNoprune => "lever_noprune",
        }
    }

    pub fn needs_predictor(self) -> bool {
        self == PolicyName::Lever
    }
}

impl std::str::FromStr for PolicyName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyName::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown policy '{s}'")))
    }
}

impl std::fmt::Display for PolicyName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_probe_layers() -> usize {
    6
}

fn default_probe_dim() -> usize {
    16
}

/// Target model. Tabular targets get synthetic hidden states from a probe so
/// that early-exit scoring works on them too.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Tabular {
        vocab_size: usize,
        order: usize,
        sharpness: f64,
        seed: u64,
        #[serde(default = "default_probe_layers")]
        probe_layers: usize,
        #[serde(default = "default_probe_dim")]
        probe_dim: usize,
        #[serde(default)]
        probe_seed: u64,
    },
    Layered {
        vocab_size: usize,
        context: usize,
        layers: usize,
        hidden_dim: usize,
        logit_scale: f64,
        seed: u64,
    },
}

impl ModelSpec {
    pub fn vocab_size(&self) -> usize {
        match self {
            ModelSpec::Tabular { vocab_size, .. } | ModelSpec::Layered { vocab_size, .. } => *vocab_size,
        }
    }

    /// Number of trailing tokens the model conditions on.
    pub fn context_len(&self) -> usize {
        match self {
            ModelSpec::Tabular { order, .. } => *order,
            ModelSpec::Layered { context, .. } => *context,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            ModelSpec::Tabular { seed, .. } | ModelSpec::Layered { seed, .. } => *seed,
        }
    }
}

fn default_noise_order() -> usize {
    1
}

fn default_noise_sharpness() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DraftSpec {
    /// Agreement with the target in `[0, 1]`.
    pub alpha: f64,
    #[serde(default = "default_noise_order")]
    pub noise_order: usize,
    #[serde(default = "default_noise_sharpness")]
    pub noise_sharpness: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalancedSpec {
    pub branching: usize,
    pub budget_rows: usize,
}

impl Default for BalancedSpec {
    fn default() -> Self {
        Self { branching: 2, budget_rows: 16 }
    }
}

/// A preset name or a full inline description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HardwareSpec {
    Preset(String),
    Inline(HardwareConfig),
}

fn default_name() -> String {
    "experiment".into()
}
fn default_chain_len() -> usize {
    8
}
fn default_prompt_len() -> usize {
    4
}
fn default_profile_rows() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Seeds the per-trial prompts.
    pub seed: u64,
    pub model: ModelSpec,
    pub draft: DraftSpec,
    pub policy: PolicyName,
    #[serde(default)]
    pub drafting: DraftConfig,
    #[serde(default)]
    pub prune: PruneConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub predictor_checkpoint: Option<String>,
    pub hardware: HardwareSpec,
    #[serde(default = "default_chain_len")]
    pub chain_len: usize,
    #[serde(default)]
    pub balanced: BalancedSpec,
    pub horizon: usize,
    pub trials: usize,
    #[serde(default = "default_prompt_len")]
    pub prompt_len: usize,
    /// Largest shape seeded into the offline latency profile.
    #[serde(default = "default_profile_rows")]
    pub profile_max_rows: usize,
    #[serde(default)]
    pub out_dir: Option<String>,
}

/// Sets `path` (dot separated) in `root` to `raw`, parsed as JSON when
/// possible and as a plain string otherwise.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut keys = path.split('.').peekable();
    let mut cur = root;
    while let Some(key) = keys.next() {
        if key.is_empty() {
            return Err(Error::config(format!("bad override path '{path}'")));
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("override '{path}': '{key}' is not inside an object")))?;
        if keys.peek().is_none() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Parses a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::config(format!("override '{s}' is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl ExperimentConfig {
    /// Builds a config from a JSON document. A saved report is accepted too;
    /// its embedded config is used. The hardware preset, if named, is
    /// inlined before `overrides` are applied so that `hardware.*` keys can
    /// be overridden.
    pub fn from_value(mut root: Value, overrides: &[(String, String)]) -> Result<Self> {
        if let Some(embedded) = root.get("config").filter(|_| root.get("config_hash").is_some()) {
            root = embedded.clone();
        }
        for (k, v) in overrides.iter().filter(|(k, _)| k == "hardware") {
            apply_override(&mut root, k, v)?;
        }
        if let Some(Value::String(name)) = root.get("hardware") {
            let hw = serde_json::to_value(preset(name)?)?;
            root["hardware"] = hw;
        }
        for (k, v) in overrides.iter().filter(|(k, _)| k != "hardware") {
            apply_override(&mut root, k, v)?;
        }
        let cfg: Self = serde_json::from_value(root)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(s: &str, overrides: &[(String, String)]) -> Result<Self> {
        Self::from_value(serde_json::from_str(s)?, overrides)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, overrides)
    }

    pub fn hardware(&self) -> Result<HardwareConfig> {
        match &self.hardware {
            HardwareSpec::Inline(h) => Ok(h.clone()),
            HardwareSpec::Preset(name) => preset(name),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.model.vocab_size();
        if v < 2 {
            return Err(Error::config("model.vocab_size must be at least 2"));
        }
        if self.horizon == 0 || self.trials == 0 || self.prompt_len == 0 {
            return Err(Error::config("horizon, trials and prompt_len must be positive"));
        }
        if self.drafting.k > v {
            return Err(Error::config("drafting.k exceeds the vocabulary"));
        }
        if self.chain_len == 0 {
            return Err(Error::config("chain_len must be positive"));
        }
        if self.profile_max_rows == 0 {
            return Err(Error::config("profile_max_rows must be positive"));
        }
        self.drafting.validate()?;
        self.prune.validate()?;
        self.train.validate()?;
        self.hardware()?.validate()
    }

    /// Canonical JSON used for hashing and embedding.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}
