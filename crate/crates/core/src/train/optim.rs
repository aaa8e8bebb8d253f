use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{OptimizerKind, TrainConfig};
use crate::checkpoint::b64;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Per-parameter gradient sums for one batch.
#[derive(Clone, Debug, Default)]
pub struct GradBuffer {
    grads: BTreeMap<ParamId, Vec<f64>>,
}

impl GradBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, grads: Vec<(ParamId, Vec<f64>)>, weight: f64) {
        for (id, g) in grads {
            let buf = self.grads.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            for (b, x) in buf.iter_mut().zip(&g) {
                *b += weight * x;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(&id).map(Vec::as_slice)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads.keys().copied()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    fn scale(&mut self, c: f64) {
        for g in self.grads.values_mut() {
            for x in g.iter_mut() {
                *x *= c;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub name: String,
    #[serde(with = "b64")]
    pub m: Vec<f64>,
    #[serde(with = "b64")]
    pub v: Vec<f64>,
}

/// Adam / AdamW moment buffers, created only for parameters that receive
/// gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub moments: BTreeMap<usize, Moments>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Checks that every buffer still matches a parameter of `store`.
    pub fn check_against(&self, store: &ParamStore) -> Result<()> {
        for (&i, mo) in &self.moments {
            let p = store.iter().nth(i).map(|(_, p)| p).ok_or_else(|| {
                Error::Checkpoint(format!("optimizer buffer {i} has no parameter"))
            })?;
            if p.name != mo.name || p.value.numel() != mo.m.len() || mo.m.len() != mo.v.len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer buffer for `{}` does not match parameter `{}`",
                    mo.name, p.name
                )));
            }
        }
        Ok(())
    }

    /// Clips `grads` to `cfg.grad_clip` and applies one update with rate
    /// `lr`. Returns the pre-clip global gradient norm.
    pub fn apply(
        &mut self,
        store: &mut ParamStore,
        mut grads: GradBuffer,
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<f64> {
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::Divergence {
                step: self.step + 1,
                lr,
                grad_norm: norm,
            });
        }
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            grads.scale(cfg.grad_clip / norm);
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps, wd) = (cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for id in grads.ids().collect::<Vec<_>>() {
            let g = grads.get(id).unwrap_or_default();
            let name = store.get(id).name.clone();
            let theta = store.tensor_mut(id).data_mut();
            let mo = self.moments.entry(id.index()).or_insert_with(|| Moments {
                name,
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for i in 0..g.len() {
                let gi = match self.kind {
                    OptimizerKind::Adam => g[i] + wd * theta[i],
                    OptimizerKind::AdamW => g[i],
                };
                mo.m[i] = b1 * mo.m[i] + (1.0 - b1) * gi;
                mo.v[i] = b2 * mo.v[i] + (1.0 - b2) * gi * gi;
                let update = (mo.m[i] / c1) / ((mo.v[i] / c2).sqrt() + eps);
                theta[i] -= match self.kind {
                    OptimizerKind::Adam => lr * update,
                    OptimizerKind::AdamW => lr * (update + wd * theta[i]),
                };
            }
        }
        Ok(norm)
    }
}
