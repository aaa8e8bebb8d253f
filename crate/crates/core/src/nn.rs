//! Small building blocks shared by the encoders, the fusion block and the LM.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::{init, ParamGroup, ParamId, ParamStore, Session};
use crate::tensor::{Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub group: ParamGroup,
    prefix: String,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R, group: ParamGroup, prefix: &str) -> Self {
        Self {
            store,
            rng,
            group,
            prefix: prefix.to_string(),
        }
    }

    pub fn scope<'b>(&'b mut self, name: &str) -> Builder<'b, R> {
        Builder {
            store: self.store,
            rng: self.rng,
            group: self.group,
            prefix: format!("{}.{}", self.prefix, name),
        }
    }

    pub fn scope_name(&self) -> &str {
        &self.prefix
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.store
            .add(format!("{}.{}", self.prefix, name), self.group, value)
    }

    pub fn linear_weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let t = init::linear(fan_in, fan_out, self.rng);
        self.add(name, t)
    }

    pub fn gaussian(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = init::scaled(shape, std, self.rng);
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn layer_norm(&mut self, name: &str, width: usize) -> LayerNormParams {
        let mut b = self.scope(name);
        LayerNormParams {
            gamma: b.add("gamma", Tensor::full(&[width], 1.0)),
            beta: b.zeros("beta", &[width]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        s.tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Low-rank additive update `x·W + scale·(x·A)·B`, with `A: [d_in, r]`,
/// `B: [r, d_out]` and `scale = alpha / r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lora {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub lora: Option<Lora>,
}

impl Linear {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let mut s = b.scope(name);
        let weight = s.linear_weight("weight", fan_in, fan_out);
        let bias = bias.then(|| s.zeros("bias", &[fan_out]));
        Self {
            weight,
            bias,
            lora: None,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let mut y = s.tape.matmul(x, w)?;
        if let Some(lora) = self.lora {
            let a = s.param(lora.a);
            let b = s.param(lora.b);
            let down = s.tape.matmul(x, a)?;
            let up = s.tape.matmul(down, b)?;
            let up = s.tape.scale(up, lora.scale)?;
            y = s.tape.add(y, up)?;
        }
        if let Some(bias) = self.bias {
            let b = s.param(bias);
            y = s.tape.add_row_bias(y, b)?;
        }
        Ok(y)
    }
}

/// Pre-norm position-wise MLP sublayer: `x + W2·gelu(W1·LN(x) + b1) + b2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedForward {
    pub norm: LayerNormParams,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, width: usize, hidden: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            norm: s.layer_norm("norm", width),
            up: Linear::new(&mut s, "up", width, hidden, true),
            down: Linear::new(&mut s, "down", hidden, width, true),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.norm.forward(s, x)?;
        let h = self.up.forward(s, h)?;
        let h = s.tape.gelu(h)?;
        let h = self.down.forward(s, h)?;
        s.tape.add(x, h)
    }
}

/// Fixed sinusoidal position table, `[len, width]`.
pub fn sinusoidal_positions(len: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; len * width];
    for pos in 0..len {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / width as f64);
            data[pos * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_parts(vec![len, width], data)
}

/// Positional table as a tape constant; `offset` shifts the first position.
pub fn add_positions(s: &mut Session, x: Var, offset: usize) -> Result<Var> {
    let (len, width) = {
        let sh = s.tape.shape(x);
        (sh[0], sh[1])
    };
    let full = sinusoidal_positions(offset + len, width);
    let table = Tensor::from_parts(vec![len, width], full.data()[offset * width..].to_vec());
    let p = s.tape.constant(table);
    s.tape.add(x, p)
}
