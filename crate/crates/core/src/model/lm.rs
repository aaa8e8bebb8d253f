//! Frozen causal decoder with LoRA on the query/value projections and a
//! gated soft-prefix path.
//!
//! Prefix rows run through the same layers as the text (causal among
//! themselves). Each text position attends to the prefix through a second
//! softmax; the concatenated head outputs pass through a `[d, d]` output
//! projection (the gate) and are added to the ordinary causal attention
//! output before `W_o`. Gates start at zero, so an untrained fusion block
//! leaves the logits exactly equal to the base LM, while the gate's own
//! gradient is already informative at zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{causal_mask, head_attention, AttentionParams};
use crate::error::{Error, Result};
use crate::nn::{add_positions, Builder, FeedForward, LayerNormParams, Linear, Lora};
use crate::params::{ParamGroup, ParamId, Session};
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub norm: LayerNormParams,
    pub attn: AttentionParams,
    pub ffn: FeedForward,
    /// `[d, d]` output projection of the prefix attention path, zero at init.
    pub prefix_gate: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderLm {
    pub token_embedding: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNormParams,
    pub unembed: Linear,
    pub width: usize,
    pub heads: usize,
}

fn attach_lora<R: Rng>(
    b: &mut Builder<'_, R>,
    name: &str,
    lin: &mut Linear,
    d_in: usize,
    d_out: usize,
    rank: usize,
    scale: f64,
) {
    let mut s = b.scope(name);
    let a = s.linear_weight("a", d_in, rank);
    let bm = s.zeros("b", &[rank, d_out]);
    lin.lora = Some(Lora { a, b: bm, scale });
}

impl DecoderLm {
    /// Registers the LM weights under `lm` (group `Lm`); adapters go to the
    /// `Lora` group and prefix gates to the fusion block's group.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        lm: &mut Builder<'_, R>,
        vocab: usize,
        width: usize,
        layers: usize,
        heads: usize,
        lora_rank: usize,
        lora_scale: f64,
    ) -> Result<Self> {
        debug_assert_eq!(lm.group, ParamGroup::Lm);
        let token_embedding = lm.gaussian("token_embedding", &[vocab, width], 1.0);
        let mut built = Vec::with_capacity(layers);
        for i in 0..layers {
            let mut l = lm.scope(&format!("layer{i}"));
            built.push((
                l.layer_norm("norm", width),
                AttentionParams::new(&mut l, "attn", width, width, heads)?,
                FeedForward::new(&mut l, "ffn", width, 4 * width),
            ));
        }
        let final_norm = lm.layer_norm("final_norm", width);
        let unembed = Linear::new(lm, "unembed", width, vocab, false);

        let prefix = lm.scope_name().to_string();
        let mut layers_out = Vec::with_capacity(layers);
        for (i, (norm, mut attn, ffn)) in built.into_iter().enumerate() {
            let mut ad = Builder::new(
                &mut *lm.store,
                &mut *lm.rng,
                ParamGroup::Lora,
                &format!("{prefix}.layer{i}.lora"),
            );
            attach_lora(
                &mut ad,
                "q",
                &mut attn.w_q,
                width,
                width,
                lora_rank,
                lora_scale,
            );
            attach_lora(
                &mut ad,
                "v",
                &mut attn.w_v,
                width,
                width,
                lora_rank,
                lora_scale,
            );
            let mut g = Builder::new(
                &mut *lm.store,
                &mut *lm.rng,
                ParamGroup::ContextQFormer,
                &format!("{prefix}.layer{i}"),
            );
            let prefix_gate = g.zeros("prefix_gate", &[width, width]);
            layers_out.push(DecoderLayer {
                norm,
                attn,
                ffn,
                prefix_gate,
            });
        }
        Ok(Self {
            token_embedding,
            layers: layers_out,
            final_norm,
            unembed,
            width,
            heads,
        })
    }

    /// Token embeddings `[L, width]` without positions.
    pub fn embed(&self, s: &mut Session, ids: &[usize]) -> Result<Var> {
        let table = s.param(self.token_embedding);
        s.tape.embedding(table, ids)
    }

    /// Runs the decoder over already-embedded rows `x: [L, width]`
    /// (positions are added here) and returns logits `[L, V]`.
    pub fn forward_embedded(&self, s: &mut Session, x: Var, prefix: Option<Var>) -> Result<Var> {
        let len = s.tape.shape(x)[0];
        if len == 0 {
            return Err(Error::EmptyInput("token sequence"));
        }
        let mut x = add_positions(s, x, 0)?;
        let text_mask = causal_mask(len);
        let mut p = prefix;
        let prefix_mask = match p {
            Some(pv) => {
                let sh = s.tape.shape(pv).to_vec();
                if sh.len() != 2 || sh[1] != self.width {
                    return Err(Error::shape("soft prefix", &sh, &[self.width]));
                }
                Some(causal_mask(sh[0]))
            }
            None => None,
        };

        for layer in &self.layers {
            let h = layer.norm.forward(s, x)?;
            let a = &layer.attn;
            let q = a.w_q.forward(s, h)?;
            let k = a.w_k.forward(s, h)?;
            let v = a.w_v.forward(s, h)?;
            let prefix_kv = match p {
                Some(pv) => {
                    let hp = layer.norm.forward(s, pv)?;
                    let qp = a.w_q.forward(s, hp)?;
                    let kp = a.w_k.forward(s, hp)?;
                    let vp = a.w_v.forward(s, hp)?;
                    Some((qp, kp, vp))
                }
                None => None,
            };

            let dh = a.head_dim();
            let mut text_heads = Vec::with_capacity(a.heads);
            let mut prefix_heads = Vec::with_capacity(a.heads);
            let mut cross_heads = Vec::with_capacity(a.heads);
            for hd in 0..a.heads {
                let (lo, hi) = (hd * dh, (hd + 1) * dh);
                let qh = s.tape.slice_cols(q, lo, hi)?;
                let kh = s.tape.slice_cols(k, lo, hi)?;
                let vh = s.tape.slice_cols(v, lo, hi)?;
                let (out, _) = head_attention(s, qh, kh, vh, Some(&text_mask))?;
                if let Some((qp, kp, vp)) = prefix_kv {
                    let kph = s.tape.slice_cols(kp, lo, hi)?;
                    let vph = s.tape.slice_cols(vp, lo, hi)?;
                    let (cross, _) = head_attention(s, qh, kph, vph, None)?;
                    cross_heads.push(cross);

                    let qph = s.tape.slice_cols(qp, lo, hi)?;
                    let (own, _) = head_attention(s, qph, kph, vph, prefix_mask.as_deref())?;
                    prefix_heads.push(own);
                }
                text_heads.push(out);
            }
            let mut joined = s.tape.concat_cols(&text_heads)?;
            if !cross_heads.is_empty() {
                let cross = s.tape.concat_cols(&cross_heads)?;
                let g = s.param(layer.prefix_gate);
                let gated = s.tape.matmul(cross, g)?;
                joined = s.tape.add(joined, gated)?;
            }
            let attn_out = a.w_o.forward(s, joined)?;
            x = s.tape.add(x, attn_out)?;
            x = layer.ffn.forward(s, x)?;

            if let Some(pv) = p {
                let joined = s.tape.concat_cols(&prefix_heads)?;
                let out = a.w_o.forward(s, joined)?;
                let pv = s.tape.add(pv, out)?;
                p = Some(layer.ffn.forward(s, pv)?);
            }
        }
        let x = self.final_norm.forward(s, x)?;
        self.unembed.forward(s, x)
    }
}
