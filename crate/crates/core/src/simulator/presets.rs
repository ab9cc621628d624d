use super::HardwareConfig;
use crate::error::{Error, Result};

/// Shipped device presets as `(name, json)`.
pub const PRESETS: &[(&str, &str)] = &[
    ("oneplus12-llama3.1-8b", include_str!("../../presets/oneplus12-llama3.1-8b.json")),
    ("oneplus12-qwen3-4b", include_str!("../../presets/oneplus12-qwen3-4b.json")),
    ("oneplus12-qwen3-8b", include_str!("../../presets/oneplus12-qwen3-8b.json")),
    ("oneplus12-qwen3-14b", include_str!("../../presets/oneplus12-qwen3-14b.json")),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

pub fn preset(name: &str) -> Result<HardwareConfig> {
    let (_, json) = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::config(format!("unknown hardware preset '{name}' (known: {})", preset_names().collect::<Vec<_>>().join(", "))))?;
    let cfg: HardwareConfig = serde_json::from_str(json)?;
    cfg.validate()?;
    Ok(cfg)
}
