//! The context fusion block.
//!
//! Learnable queries are concatenated with the embedded current instruction
//! and self-attend jointly. Only the query rows are kept; they then
//! cross-attend over the memory snapshot (an order-free set with no
//! positional information), pass through a feed-forward sublayer and are
//! projected to the LM width as a soft prefix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_attention, AttentionParams};
use crate::error::{Error, Result};
use crate::memory::MemorySnapshot;
use crate::nn::{add_positions, Builder, FeedForward, LayerNormParams, Linear};
use crate::params::{ParamId, Session};
use crate::tensor::Var;
use crate::tokenizer::VOCAB_SIZE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QFormerLayer {
    pub self_norm: LayerNormParams,
    pub self_attn: AttentionParams,
    pub cross_norm: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextQFormerParams {
    /// `[q, width]` learnable query bank.
    pub queries: ParamId,
    /// Instruction token embeddings, `[V, width]`.
    pub token_embedding: ParamId,
    pub layers: Vec<QFormerLayer>,
    pub final_norm: LayerNormParams,
    pub output: Linear,
    pub query_count: usize,
    pub width: usize,
    pub d_mem: usize,
    pub d_lm: usize,
}

/// Which stages run; everything on by default.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionOptions {
    pub cross_attention: bool,
}

impl Default for FusionOptions {
    fn default() -> Self {
        Self {
            cross_attention: true,
        }
    }
}

pub struct FusionOutput {
    /// `[q, d_lm]` soft prefix.
    pub prefix: Var,
    /// Memory rows the cross-attention stage attended over.
    pub memory_entries_attended: usize,
}

impl ContextQFormerParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        query_count: usize,
        width: usize,
        heads: usize,
        layers: usize,
        d_mem: usize,
        d_lm: usize,
    ) -> Result<Self> {
        if query_count == 0 {
            return Err(Error::Config("query count must be at least 1".into()));
        }
        if layers == 0 {
            return Err(Error::Config(
                "fusion block needs at least one layer".into(),
            ));
        }
        let mut s = b.scope("context_qformer");
        let queries = s.gaussian("queries", &[query_count, width], 1.0);
        let token_embedding = s.gaussian("token_embedding", &[VOCAB_SIZE, width], 1.0);
        let layers = (0..layers)
            .map(|i| {
                let mut l = s.scope(&format!("layer{i}"));
                Ok(QFormerLayer {
                    self_norm: l.layer_norm("self_norm", width),
                    self_attn: AttentionParams::new(&mut l, "self_attn", width, width, heads)?,
                    cross_norm: l.layer_norm("cross_norm", width),
                    cross_attn: AttentionParams::new(&mut l, "cross_attn", width, d_mem, heads)?,
                    ffn: FeedForward::new(&mut l, "ffn", width, 2 * width),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            queries,
            token_embedding,
            layers,
            final_norm: s.layer_norm("final_norm", width),
            output: Linear::new(&mut s, "output", width, d_lm, true),
            query_count,
            width,
            d_mem,
            d_lm,
        })
    }

    /// Embeds instruction token ids as `[t, width]` with positions.
    pub fn embed_instruction(&self, s: &mut Session, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("instruction"));
        }
        let table = s.param(self.token_embedding);
        let x = s.tape.embedding(table, ids)?;
        add_positions(s, x, 0)
    }

    pub fn forward(
        &self,
        s: &mut Session,
        instruction: Var,
        memory: &MemorySnapshot,
    ) -> Result<FusionOutput> {
        self.forward_with(s, instruction, memory, FusionOptions::default())
    }

    pub fn forward_with(
        &self,
        s: &mut Session,
        instruction: Var,
        memory: &MemorySnapshot,
        opts: FusionOptions,
    ) -> Result<FusionOutput> {
        let shape = s.tape.shape(instruction).to_vec();
        if shape.len() != 2 || shape[1] != self.width {
            return Err(Error::shape(
                "context_qformer instruction",
                &shape,
                &[self.width],
            ));
        }
        if !memory.is_empty() && memory.width() != self.d_mem {
            return Err(Error::Config(format!(
                "memory entries have width {} but cross-attention expects {}",
                memory.width(),
                self.d_mem
            )));
        }
        let mem = match memory.embeddings() {
            Some(m) if opts.cross_attention => Some(s.tape.constant(m)),
            _ => None,
        };
        self.forward_rows(s, instruction, mem)
    }

    /// Fusion over memory rows already on the tape (`[n, d_mem]`), so
    /// gradients can reach the encoders that produced them. `None` is an
    /// empty memory.
    pub fn forward_rows(
        &self,
        s: &mut Session,
        instruction: Var,
        mem: Option<Var>,
    ) -> Result<FusionOutput> {
        let shape = s.tape.shape(instruction).to_vec();
        if shape.len() != 2 || shape[1] != self.width {
            return Err(Error::shape(
                "context_qformer instruction",
                &shape,
                &[self.width],
            ));
        }
        if let Some(m) = mem {
            let ms = s.tape.shape(m);
            if ms.len() != 2 || ms[1] != self.d_mem {
                return Err(Error::shape("context_qformer memory", ms, &[self.d_mem]));
            }
        }
        let q = self.query_count;
        let t = shape[0];
        let mut attended = 0;

        let mut queries = s.param(self.queries);
        let mut instr = instruction;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let joint = s.tape.concat_rows(&[queries, instr])?;
            let h = layer.self_norm.forward(s, joint)?;
            let a = multi_head_attention(s, h, h, &layer.self_attn, None)?;
            let joint = s.tape.add(joint, a)?;

            let mut qs = s.tape.slice_rows(joint, 0, q)?;
            instr = s.tape.slice_rows(joint, q, q + t)?;
            if let Some(m) = mem {
                let h = layer.cross_norm.forward(s, qs)?;
                let c = multi_head_attention(s, h, m, &layer.cross_attn, None)?;
                qs = s.tape.add(qs, c)?;
                attended = s.tape.shape(m)[0];
            }
            queries = layer.ffn.forward(s, qs)?;
            if i < last {
                instr = layer.ffn.forward(s, instr)?;
            }
        }
        let out = self.final_norm.forward(s, queries)?;
        let prefix = self.output.forward(s, out)?;
        Ok(FusionOutput {
            prefix,
            memory_entries_attended: attended,
        })
    }
}
