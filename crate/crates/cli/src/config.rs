//! Run configuration: JSON file, dotted-path overrides, and hashing.
//! Precedence is CLI `--set` over file over built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use spt_core::backbone::DecodeStrategy;
use spt_core::container::sha256_hex;
use spt_core::metrics::BleuMode;
use spt_core::optim::AdamConfig;
use spt_core::synth::SynthConfig;
use spt_core::trainer::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub backbone: BackboneSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub pretrain: Option<PathBuf>,
    /// Backbone checkpoint consumed by train/eval/generate.
    pub backbone_checkpoint: Option<PathBuf>,
    /// Run checkpoint consumed by eval/generate.
    pub run_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub dropout_percent: u8,
    pub seed: u64,
    pub min_count: usize,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,
    pub position_jitter: usize,
    pub adam: AdamConfig,
    pub target_loss: Option<f64>,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection {
            hidden_dim: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 256,
            max_positions: 512,
            dropout_percent: 0,
            seed: 11,
            min_count: 1,
            pretrain_steps: 8000,
            pretrain_lr: 2e-3,
            pretrain_batch_size: 4,
            position_jitter: 16,
            adam: AdamConfig::default(),
            target_loss: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_new_tokens: usize,
    pub strategy: DecodeStrategy,
    pub bleu_mode: BleuMode,
    /// Inference-time score noise applied while evaluating/generating.
    pub score_noise_alpha: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_new_tokens: 16,
            strategy: DecodeStrategy::Greedy,
            bleu_mode: BleuMode::Sentence,
            score_noise_alpha: 0.0,
            seed: 1,
        }
    }
}

/// Loads the layered configuration: defaults, then the optional file, then
/// every dotted-path `--set` override in order.
pub fn load_config(
    path: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let file_value: serde_json::Value = serde_json::from_str(&text)
            .with_context(|| format!("config {} is not valid JSON", path.display()))?;
        merge(&mut value, file_value);
    }
    for set in sets {
        apply_set(&mut value, set)?;
    }
    let mut config: RunConfig = serde_json::from_value(value.clone()).map_err(|e| {
        anyhow::anyhow!("invalid configuration: {}", e)
    })?;
    if let Some(seed) = seed {
        config.train.seed = seed;
        config.synth.seed = seed;
        config.backbone.seed = seed;
    }
    config.train.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok(config)
}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(base_map), serde_json::Value::Object(overlay_map)) => {
            for (key, overlay_value) in overlay_map {
                match base_map.get_mut(&key) {
                    Some(base_value) => merge(base_value, overlay_value),
                    None => {
                        base_map.insert(key, overlay_value);
                    }
                }
            }
        }
        (base_slot, overlay_value) => *base_slot = overlay_value,
    }
}

/// Applies one `path.to.field=value` override. The value is parsed as JSON
/// when possible and kept as a string otherwise.
fn apply_set(value: &mut serde_json::Value, set: &str) -> Result<()> {
    let Some((path, raw)) = set.split_once('=') else {
        bail!("--set expects key.path=value, got '{set}'");
    };
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = value;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, segment) in segments.iter().enumerate() {
        let map = cursor
            .as_object_mut()
            .with_context(|| format!("--set {path}: '{segment}' is not an object field"))?;
        if i + 1 == segments.len() {
            map.insert(segment.to_string(), parsed);
            return Ok(());
        }
        cursor = map
            .entry(segment.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}

/// Canonical hash of a config: serialize to JSON and digest.
pub fn config_hash(config: &RunConfig) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(config)?.as_bytes()))
}
