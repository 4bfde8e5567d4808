//! Run configuration: built-in defaults, then a flat TOML file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hero_core::downstream::{FinetuneConfig, DEFAULT_QA_LAMBDA};
use hero_core::optim::AdamWConfig;
use hero_core::{HeroError, ModelConfig};
use serde::{Deserialize, Serialize};

/// Pre-training step size for desk-scale models.
pub const DESK_PRETRAIN_LR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    /// Comma-separated pre-training tasks.
    pub tasks: String,
    pub lr: f64,
    pub finetune_lr: f64,
    pub weight_decay: f64,
    pub qa_lambda: f64,
    pub corpus: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub checkpoint_every: usize,
    pub log: PathBuf,
    pub threads: usize,
    pub d: usize,
    pub cross_layers: usize,
    pub cross_heads: usize,
    pub temporal_layers: usize,
    pub temporal_heads: usize,
    pub decoder_layers: usize,
    pub max_frames: usize,
    pub max_tokens: usize,
    pub ffn_multiplier: usize,
    pub dropout: f64,
    pub conv_kernel: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let adam = AdamWConfig::default();
        Self {
            seed: 1,
            steps: 500,
            batch_size: 8,
            tasks: "mlm,mnce,fom,vsm".into(),
            lr: DESK_PRETRAIN_LR,
            finetune_lr: FinetuneConfig::default().adam.lr,
            weight_decay: adam.weight_decay,
            qa_lambda: DEFAULT_QA_LAMBDA,
            corpus: "corpus.jsonl".into(),
            checkpoint_dir: "checkpoints".into(),
            checkpoint_every: 100,
            log: "train.log".into(),
            threads: 1,
            d: m.d,
            cross_layers: m.cross_layers,
            cross_heads: m.cross_heads,
            temporal_layers: m.temporal_layers,
            temporal_heads: m.temporal_heads,
            decoder_layers: m.decoder_layers,
            max_frames: m.max_frames,
            max_tokens: m.max_tokens,
            ffn_multiplier: m.ffn_multiplier,
            dropout: m.dropout,
            conv_kernel: m.conv_kernel,
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with the keys present in `path`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text)
            .map_err(|e| HeroError::Config(format!("config {}: {e}", path.display())).into())
    }

    pub fn model(&self, vocab_size: usize, frame_feature_dim: usize) -> ModelConfig {
        ModelConfig {
            d: self.d,
            cross_layers: self.cross_layers,
            cross_heads: self.cross_heads,
            temporal_layers: self.temporal_layers,
            temporal_heads: self.temporal_heads,
            decoder_layers: self.decoder_layers,
            vocab_size,
            frame_feature_dim,
            max_frames: self.max_frames,
            max_tokens: self.max_tokens,
            ffn_multiplier: self.ffn_multiplier,
            dropout: self.dropout,
            conv_kernel: self.conv_kernel,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
