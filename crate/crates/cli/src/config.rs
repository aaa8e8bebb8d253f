//! Run configuration: one TOML file with a table per concern. Missing keys
//! fall back to the built-in presets, so a file only lists what it changes.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cqf_core::data::CorpusConfig;
use cqf_core::model::ModelConfig;
use cqf_core::train::{Stage, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Single source of randomness; copied into every section below.
    pub seed: u64,
    pub model: ModelConfig,
    pub data: CorpusConfig,
    pub base: TrainConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            data: CorpusConfig::default(),
            base: TrainConfig::base(),
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::finetune(),
        }
    }
}

fn merge(into: &mut toml::Value, from: toml::Value) {
    match (into, from) {
        (toml::Value::Table(a), toml::Value::Table(b)) => {
            for (k, v) in b {
                match a.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        a.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                let file: toml::Value = toml::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?;
                let mut value = toml::Value::try_from(Self::default())?;
                merge(&mut value, file);
                value
                    .try_into()
                    .with_context(|| format!("invalid config {}", p.display()))?
            }
        };
        for (name, section, stage) in [
            ("base", &cfg.base, Stage::Base),
            ("pretrain", &cfg.pretrain, Stage::Pretrain),
            ("finetune", &cfg.finetune, Stage::Finetune),
        ] {
            if section.stage != stage {
                bail!("[{name}] must keep stage = \"{}\"", stage.name());
            }
        }
        if cfg.data.d_img != cfg.model.d_img {
            bail!(
                "[data] d_img = {} does not match [model] d_img = {}",
                cfg.data.d_img,
                cfg.model.d_img
            );
        }
        let seed = cfg.seed;
        cfg.set_seed(seed);
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.base.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
    }

    pub fn stage(&self, stage: Stage) -> &TrainConfig {
        match stage {
            Stage::Base => &self.base,
            Stage::Pretrain => &self.pretrain,
            Stage::Finetune => &self.finetune,
        }
    }

    pub fn stage_mut(&mut self, stage: Stage) -> &mut TrainConfig {
        match stage {
            Stage::Base => &mut self.base,
            Stage::Pretrain => &mut self.pretrain,
            Stage::Finetune => &mut self.finetune,
        }
    }
}
