//! JSON checkpoint container. Float arrays are stored as base64 of their
//! little-endian bytes so a save/load round trip is bit-exact.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::MemoryQueue;
use crate::model::{build_model, Model, ModelConfig};
use crate::params::{GroupSet, ParamGroup};
use crate::tensor::Tensor;
use crate::train::{OptimizerState, Stage, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn encode(v: &[f64]) -> String {
        let mut bytes = Vec::with_capacity(v.len() * 8);
        for x in v {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        STANDARD.encode(bytes)
    }

    pub fn decode(s: &str) -> Result<Vec<f64>, String> {
        let bytes = STANDARD.decode(s).map_err(|e| e.to_string())?;
        if bytes.len() % 8 != 0 {
            return Err(format!(
                "{} bytes is not a whole number of f64 values",
                bytes.len()
            ));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let s = String::deserialize(d)?;
        decode(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedTensor {
    pub name: String,
    pub group: ParamGroup,
    pub trainable: bool,
    pub shape: Vec<usize>,
    #[serde(with = "b64")]
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model_config: ModelConfig,
    pub stage: Option<Stage>,
    pub train_config: Option<TrainConfig>,
    pub step: u64,
    pub params: Vec<SavedTensor>,
    pub optimizer: Option<OptimizerState>,
    pub rng: Option<ChaCha8Rng>,
    pub eval_loss: Option<f64>,
    pub memory: Option<MemoryQueue>,
}

impl Checkpoint {
    /// Snapshot of `model` with `trainable` marking the active groups.
    pub fn from_model(model: &Model, trainable: GroupSet) -> Self {
        let params = model
            .store
            .iter()
            .map(|(_, p)| SavedTensor {
                name: p.name.clone(),
                group: p.group,
                trainable: trainable.contains(p.group),
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            model_config: model.config.clone(),
            stage: None,
            train_config: None,
            step: 0,
            params,
            optimizer: None,
            rng: None,
            eval_loss: None,
            memory: None,
        }
    }

    /// Rebuilds the model structure from the config echo and loads values.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = build_model(&self.model_config)?;
        let values = self
            .params
            .iter()
            .map(|p| {
                Ok((
                    p.name.clone(),
                    Tensor::new(p.shape.clone(), p.data.clone())?,
                ))
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        model
            .store
            .load_values(values)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = self.to_json()?;
        // write-then-rename so a crash never leaves a half-written file
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, json).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported version {}",
                path.display(),
                ck.version
            )));
        }
        Ok(ck)
    }
}
