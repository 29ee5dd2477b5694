//! Run configuration: one TOML file with `[corpus]`, `[model]`, `[train]` and
//! `[eval]` sections, plus the content hashes that tie artifacts together.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::eval::{Setting, DEFAULT_SHORTLIST};
use crate::model::ModelConfig;
use crate::objectives::TrainConfig;

/// Hex SHA-256 of the JSON serialization of `value`.
pub fn content_hash<S: Serialize>(value: &S) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Model hyperparameters. Image size and vocabulary come from the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub ca_heads: usize,
    pub image_blocks: usize,
    pub text_blocks: usize,
    pub cross_blocks: usize,
    pub ffn_dim: usize,
    pub proj_dim: usize,
    pub tau: f64,
    pub pose_enabled: bool,
    pub ln_eps: f64,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            patch_size: m.patch_size,
            dim: m.dim,
            heads: m.heads,
            ca_heads: m.ca_heads,
            image_blocks: m.image_blocks,
            text_blocks: m.text_blocks,
            cross_blocks: m.cross_blocks,
            ffn_dim: m.ffn_dim,
            proj_dim: m.proj_dim,
            tau: m.tau,
            pose_enabled: m.pose_enabled,
            ln_eps: m.ln_eps,
            init_seed: m.init_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub setting: Setting,
    pub shortlist_k: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { setting: Setting::Behavior, shortlist_k: DEFAULT_SHORTLIST }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let field = e.message().split('`').nth(1).unwrap_or("config").to_string();
            Error::config(field, e.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model_config().validate()?;
        self.train.validate()
    }

    /// Uses `seed` for corpus generation, initialization and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        self.model.init_seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            image_size: self.corpus.image_size,
            patch_size: m.patch_size,
            vocab_size: self.corpus.vocab_size,
            dim: m.dim,
            heads: m.heads,
            ca_heads: m.ca_heads,
            image_blocks: m.image_blocks,
            text_blocks: m.text_blocks,
            cross_blocks: m.cross_blocks,
            ffn_dim: m.ffn_dim,
            proj_dim: m.proj_dim,
            tau: m.tau,
            pose_enabled: m.pose_enabled,
            ln_eps: m.ln_eps,
            init_seed: m.init_seed,
        }
    }

    /// Hash of the corpus section, stored in corpus manifests.
    pub fn corpus_hash(&self) -> String {
        content_hash(&self.corpus)
    }

    /// Hash of everything that shapes a checkpoint. The eval section is left
    /// out so one checkpoint can be scored under either setting.
    pub fn config_hash(&self) -> String {
        content_hash(&(&self.corpus, &self.model, &self.train))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.config_hash(), cfg.config_hash());
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.train.batch_size, 22);
        assert_eq!(cfg.train.epochs, 30);
        assert_eq!(cfg.train.lr_max, 1e-4);
        assert_eq!(cfg.train.lr_min, 1e-5);
        assert_eq!(cfg.train.warmup_steps, 500);
        assert_eq!(cfg.train.weight_decay, 0.01);
        assert_eq!(cfg.train.mask_rate, 0.25);
        assert_eq!(cfg.eval.shortlist_k, 128);
        assert_eq!(cfg.corpus.ratio, [2, 3]);
        assert_eq!(cfg.model.proj_dim, 256);
    }

    #[test]
    fn unknown_field_is_named() {
        let err = RunConfig::from_toml("[train]\nbatch = 4\n").unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "batch"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn invalid_value_is_named() {
        let err = RunConfig::from_toml("[model]\ndim = 30\nheads = 4\n").unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "model.heads"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn hashes_track_relevant_sections() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.eval.shortlist_k = 3;
        assert_eq!(a.config_hash(), b.config_hash());
        b.train.ihnm = false;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.corpus_hash(), b.corpus_hash());
        let c = a.clone().with_seed(9);
        assert_ne!(a.corpus_hash(), c.corpus_hash());
        assert_eq!(c.model.init_seed, 9);
    }
}
