//! Run configuration, loaded from JSON. Every section has defaults, so `{}`
//! is a valid config.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::AugmentConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricConfig;
use crate::params::AdamConfig;
use crate::skc::SkcConfig;
use crate::tkc::TkcConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnowledgeConfig {
    /// Spatial attributes per class.
    pub g: usize,
    /// Temporal attributes per class.
    pub l: usize,
}

impl Default for KnowledgeConfig {
    fn default() -> Self {
        Self { g: 6, l: 3 }
    }
}

/// How `K > 1` support clips of one class are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotAggregation {
    /// Average the clips' prototypes, then score once.
    #[default]
    MeanPrototypes,
    /// Score every clip, then average the distances.
    MeanScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    /// Classes per episode (`M`).
    pub way: usize,
    /// Support clips per class (`K`).
    pub shot: usize,
    pub train_queries_per_class: usize,
    pub eval_queries_per_class: usize,
    pub shot_agg: ShotAggregation,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 1,
            train_queries_per_class: 1,
            eval_queries_per_class: 5,
            shot_agg: ShotAggregation::MeanPrototypes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub episodes_per_epoch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub augment: bool,
    /// Log the running loss every this many episodes (0 disables).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes_per_epoch: 500,
            epochs: 1,
            seed: 0,
            adam: AdamConfig::default(),
            augment: true,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn total_episodes(&self) -> usize {
        self.episodes_per_epoch * self.epochs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
    /// Worker threads; 1 keeps evaluation single-threaded.
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            seed: 1,
            workers: 1,
        }
    }
}

/// Everything that determines the model's architecture and scoring.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub knowledge: KnowledgeConfig,
    pub skc: SkcConfig,
    pub tkc: TkcConfig,
    pub metric: MetricConfig,
    /// Seed of the parameter initialization.
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.metric.validate()?;
        let c = self.encoder.dim;
        if c == 0 || self.encoder.frames == 0 || self.encoder.patches == 0 {
            return Err(Error::Config("encoder dims must be >= 1".into()));
        }
        if self.skc.num_prototypes == 0 {
            return Err(Error::Config("need at least one prototype".into()));
        }
        for (what, heads) in [("skc", self.skc.heads), ("tkc", self.tkc.heads)] {
            if heads == 0 || !c.is_multiple_of(heads) {
                return Err(Error::Config(format!(
                    "{what}.heads={heads} must divide dim {c}"
                )));
            }
        }
        if self.knowledge.g == 0 || self.knowledge.l == 0 {
            return Err(Error::Config("attribute counts must be >= 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub episode: EpisodeConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub augment: AugmentConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let e = &self.episode;
        if e.way < 2 || e.shot < 1 {
            return Err(Error::Config(format!(
                "need way >= 2 and shot >= 1, got {}-way {}-shot",
                e.way, e.shot
            )));
        }
        if e.train_queries_per_class == 0 || e.eval_queries_per_class == 0 {
            return Err(Error::Config("queries per class must be >= 1".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}
