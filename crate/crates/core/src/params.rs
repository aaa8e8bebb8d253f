//! Named parameter storage and per-forward binding onto a tape.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which sub-network a parameter belongs to. Freezing is decided per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Decoder LM weights. Never trained.
    Lm,
    Lora,
    ImageEncoder,
    Abstractor,
    Projection,
    TextEncoder,
    ContextQFormer,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Lm,
        ParamGroup::Lora,
        ParamGroup::ImageEncoder,
        ParamGroup::Abstractor,
        ParamGroup::Projection,
        ParamGroup::TextEncoder,
        ParamGroup::ContextQFormer,
    ];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Lm => "lm",
            ParamGroup::Lora => "lora",
            ParamGroup::ImageEncoder => "image_encoder",
            ParamGroup::Abstractor => "abstractor",
            ParamGroup::Projection => "projection",
            ParamGroup::TextEncoder => "text_encoder",
            ParamGroup::ContextQFormer => "context_qformer",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Set of groups that receive gradients. `of`/`with` never add the LM
/// group; only [`GroupSet::base_lm`] makes the LM trainable.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GroupSet(u8);

impl GroupSet {
    pub fn none() -> Self {
        Self(0)
    }

    /// The LM weights alone, for training the base model before it is frozen.
    pub fn base_lm() -> Self {
        Self(ParamGroup::Lm.bit())
    }

    pub fn of(groups: &[ParamGroup]) -> Self {
        let mut s = Self(0);
        for &g in groups {
            s = s.with(g);
        }
        s
    }

    pub fn with(self, g: ParamGroup) -> Self {
        if g == ParamGroup::Lm {
            return self;
        }
        Self(self.0 | g.bit())
    }

    pub fn contains(self, g: ParamGroup) -> bool {
        self.0 & g.bit() != 0
    }

    pub fn groups(self) -> impl Iterator<Item = ParamGroup> {
        ParamGroup::ALL
            .into_iter()
            .filter(move |g| self.contains(*g))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Element count per group, in [`ParamGroup::ALL`] order.
    pub fn counts(&self) -> Vec<(ParamGroup, usize)> {
        ParamGroup::ALL
            .iter()
            .map(|&g| {
                let n = self
                    .params
                    .iter()
                    .filter(|p| p.group == g)
                    .map(|p| p.value.numel())
                    .sum();
                (g, n)
            })
            .collect()
    }

    /// Replaces every value from `other`, which must have the same layout.
    pub fn load_values(&mut self, other: Vec<(String, Tensor)>) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                other.len()
            )));
        }
        for (p, (name, t)) in self.params.iter_mut().zip(other) {
            if p.name != name || p.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    p.name,
                    p.value.shape(),
                    name,
                    t.shape()
                )));
            }
            p.value = t;
        }
        Ok(())
    }
}

/// One forward pass: a fresh tape plus lazily bound parameters.
///
/// Parameters in a trainable group enter the tape as gradient leaves; all
/// others enter as constants, so no gradient is ever computed for them.
pub struct Session<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    trainable: GroupSet,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore, trainable: GroupSet) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    pub fn inference(store: &'s ParamStore) -> Self {
        Self::new(store, GroupSet::none())
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn trainable(&self) -> GroupSet {
        self.trainable
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let t = p.value.clone();
        let v = if self.trainable.contains(p.group) {
            self.tape.param(t)
        } else {
            self.tape.constant(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every bound trainable parameter after `backward`.
    pub fn gradients(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let g = self.tape.grad(v)?;
                Some((ParamId(i), g.to_vec()))
            })
            .collect()
    }
}

/// Weight initializers shared by all sub-networks.
pub(crate) mod init {
    use super::*;

    /// Gaussian with std `1/sqrt(fan_in)`.
    pub fn linear<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
        Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
    }

    pub fn scaled<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
        Tensor::randn(shape, std, rng)
    }
}
