//! Visual abstractor and alignment projection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_attention, AttentionParams};
use crate::error::Result;
use crate::memory::ImageEncoder;
use crate::nn::{Builder, FeedForward, LayerNormParams, Linear};
use crate::params::{ParamGroup, ParamId, Session};
use crate::tensor::{Tensor, Var};

/// Fixed query set that cross-attends to encoder patch outputs, so any
/// image becomes exactly `query_count` vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Abstractor {
    pub queries: ParamId,
    pub norm: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub ffn: FeedForward,
    pub query_count: usize,
}

impl Abstractor {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        query_count: usize,
        width: usize,
        heads: usize,
    ) -> Result<Self> {
        debug_assert_eq!(b.group, ParamGroup::Abstractor);
        let mut s = b.scope("abstractor");
        Ok(Self {
            queries: s.gaussian("queries", &[query_count, width], 1.0),
            norm: s.layer_norm("norm", width),
            cross_attn: AttentionParams::new(&mut s, "cross_attn", width, width, heads)?,
            ffn: FeedForward::new(&mut s, "ffn", width, 2 * width),
            query_count,
        })
    }

    /// `[a, width]` summary of encoded patches `[p, width]`.
    pub fn forward(&self, s: &mut Session, patches: Var) -> Result<Var> {
        let q = s.param(self.queries);
        let h = self.norm.forward(s, q)?;
        let c = multi_head_attention(s, h, patches, &self.cross_attn, None)?;
        let x = s.tape.add(q, c)?;
        self.ffn.forward(s, x)
    }
}

/// Encoder, abstractor and projection together: patches to `[a, d_lm]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualPath {
    pub encoder: ImageEncoder,
    pub abstractor: Abstractor,
    /// Alignment projection to the LM width.
    pub projection: Linear,
}

impl VisualPath {
    pub fn abstract_image(&self, s: &mut Session, patches: &Tensor) -> Result<Var> {
        let enc = self.encoder.forward(s, patches)?;
        let a = self.abstractor.forward(s, enc.patches)?;
        self.projection.forward(s, a)
    }
}
