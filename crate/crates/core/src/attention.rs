//! Scaled dot-product multi-head attention.
//!
//! Sublayers are pre-norm: callers normalize the input, call
//! [`multi_head_attention`] and add the residual themselves.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Builder, Linear};
use crate::params::Session;
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub heads: usize,
    /// Width of the query stream and of the output.
    pub d_model: usize,
    /// Width of the key/value input; equals `d_model` for self-attention.
    pub d_kv: usize,
}

impl AttentionParams {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        d_model: usize,
        d_kv: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model width {d_model} is not divisible by {heads} heads"
            )));
        }
        let mut s = b.scope(name);
        Ok(Self {
            w_q: Linear::new(&mut s, "w_q", d_model, d_model, false),
            w_k: Linear::new(&mut s, "w_k", d_kv, d_model, false),
            w_v: Linear::new(&mut s, "w_v", d_kv, d_model, false),
            w_o: Linear::new(&mut s, "w_o", d_model, d_model, false),
            heads,
            d_model,
            d_kv,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Attention for one head on already-projected inputs.
/// `allowed` is a row-major `[a, b]` visibility mask.
pub fn head_attention(
    s: &mut Session,
    q: Var,
    k: Var,
    v: Var,
    allowed: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let dh = s.tape.shape(q)[1];
    let scores = s.tape.matmul_nt(q, k)?;
    let scores = s.tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let probs = match allowed {
        Some(mask) => s.tape.masked_softmax(scores, mask)?,
        None => s.tape.softmax(scores, 1)?,
    };
    let out = s.tape.matmul(probs, v)?;
    Ok((out, probs))
}

/// Multi-head attention of `queries_in: [a, d]` over `keys_values_in: [b, d_kv]`.
pub fn multi_head_attention(
    s: &mut Session,
    queries_in: Var,
    keys_values_in: Var,
    params: &AttentionParams,
    mask: Option<&[bool]>,
) -> Result<Var> {
    multi_head_attention_with_weights(s, queries_in, keys_values_in, params, mask).map(|(o, _)| o)
}

/// Like [`multi_head_attention`], also returning each head's `[a, b]` weights.
pub fn multi_head_attention_with_weights(
    s: &mut Session,
    queries_in: Var,
    keys_values_in: Var,
    params: &AttentionParams,
    mask: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    let qs = s.tape.shape(queries_in).to_vec();
    let ks = s.tape.shape(keys_values_in).to_vec();
    if qs.len() != 2 || qs[1] != params.d_model {
        return Err(Error::shape("attention queries", &qs, &[params.d_model]));
    }
    if ks.len() != 2 || ks[1] != params.d_kv {
        return Err(Error::Config(format!(
            "key/value width {} does not match attention input width {}",
            ks.get(1).copied().unwrap_or(0),
            params.d_kv
        )));
    }
    if let Some(m) = mask {
        if m.len() != qs[0] * ks[0] {
            return Err(Error::shape("attention mask", &[qs[0], ks[0]], &[m.len()]));
        }
    }
    let q = params.w_q.forward(s, queries_in)?;
    let k = params.w_k.forward(s, keys_values_in)?;
    let v = params.w_v.forward(s, keys_values_in)?;
    let dh = params.head_dim();
    let mut heads = Vec::with_capacity(params.heads);
    let mut weights = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if params.heads == 1 {
            (q, k, v)
        } else {
            (
                s.tape.slice_cols(q, lo, hi)?,
                s.tape.slice_cols(k, lo, hi)?,
                s.tape.slice_cols(v, lo, hi)?,
            )
        };
        let (out, probs) = head_attention(s, qh, kh, vh, mask)?;
        heads.push(out);
        weights.push(probs);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        s.tape.concat_cols(&heads)?
    };
    let out = params.w_o.forward(s, joined)?;
    Ok((out, weights))
}

/// Causal visibility mask for a `[n, n]` self-attention.
pub fn causal_mask(n: usize) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            m[i * n + j] = true;
        }
    }
    m
}
