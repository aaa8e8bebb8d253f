//! The assembled multi-modal dialogue model.

mod config;
mod lm;
pub mod template;
mod vision;

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::ModelConfig;
pub use lm::{DecoderLayer, DecoderLm};
pub use template::{
    assemble_dialogue_prompt, assemble_pretrain_prompt, LossTurns, Segment, TokenSequence,
    TruncationReport, TurnText,
};
pub use vision::{Abstractor, VisualPath};

use crate::error::{Error, Result};
use crate::memory::{
    EntryKind, ImageEncoder, MemoryEntry, MemoryQueue, MemorySnapshot, TextEncoder,
};
use crate::nn::{Builder, Linear};
use crate::params::{GroupSet, ParamGroup, ParamStore, Session};
use crate::qformer::{ContextQFormerParams, FusionOptions};
use crate::tensor::{Tensor, Var};
use crate::tokenizer::{self, AI, EOA, HUMAN};

/// Resolves image references to patch-feature matrices `[p, d_img]`.
pub trait ImageLookup {
    fn patches(&self, image_ref: &str) -> Option<&Tensor>;
}

impl ImageLookup for BTreeMap<String, Tensor> {
    fn patches(&self, image_ref: &str) -> Option<&Tensor> {
        self.get(image_ref)
    }
}

/// Lookup for text-only sequences.
pub struct NoImages;

impl ImageLookup for NoImages {
    fn patches(&self, _: &str) -> Option<&Tensor> {
        None
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub lm: DecoderLm,
    pub text_encoder: TextEncoder,
    pub visual: VisualPath,
    pub qformer: ContextQFormerParams,
}

pub struct ForwardOutput {
    /// `[L, V]` next-token logits.
    pub logits: Var,
    pub memory_entries_attended: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum DecodeMode {
    #[default]
    Greedy,
    Temperature {
        temperature: f64,
        seed: u64,
    },
}

/// Parameter counts per group, split by whether the group is trainable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub groups: Vec<(ParamGroup, usize, bool)>,
    pub frozen: usize,
    pub trainable: usize,
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (g, n, t) in &self.groups {
            writeln!(
                f,
                "{:<16} {:>10} {}",
                g.name(),
                n,
                if *t { "trainable" } else { "frozen" }
            )?;
        }
        writeln!(f, "{:<16} {:>10}", "frozen", self.frozen)?;
        write!(f, "{:<16} {:>10}", "trainable", self.trainable)
    }
}

/// Deterministic construction from `config.seed`.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let c = config;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);

    let lm = {
        let mut b = Builder::new(&mut store, &mut rng, ParamGroup::Lm, "lm");
        DecoderLm::new(
            &mut b,
            c.vocab_size,
            c.d_lm,
            c.lm_layers,
            c.lm_heads,
            c.lora_rank,
            c.lora_scale(),
        )?
    };
    let text_encoder = {
        let mut b = Builder::new(&mut store, &mut rng, ParamGroup::TextEncoder, "memory");
        TextEncoder::new(
            &mut b,
            c.d_mem,
            c.text_encoder_layers,
            c.text_encoder_heads,
            c.encoder_positions,
        )?
    };
    let encoder = {
        let mut b = Builder::new(&mut store, &mut rng, ParamGroup::ImageEncoder, "vision");
        ImageEncoder::new(
            &mut b,
            c.d_img,
            c.image_encoder_width,
            c.d_mem,
            c.image_encoder_layers,
            c.image_encoder_heads,
            c.encoder_positions,
        )?
    };
    let abstractor = {
        let mut b = Builder::new(&mut store, &mut rng, ParamGroup::Abstractor, "vision");
        Abstractor::new(
            &mut b,
            c.abstractor_queries,
            c.image_encoder_width,
            c.image_encoder_heads,
        )?
    };
    let projection = {
        let mut b = Builder::new(&mut store, &mut rng, ParamGroup::Projection, "vision");
        Linear::new(&mut b, "projection", c.image_encoder_width, c.d_lm, true)
    };
    let qformer = {
        let mut b = Builder::new(&mut store, &mut rng, ParamGroup::ContextQFormer, "fusion");
        ContextQFormerParams::new(
            &mut b,
            c.query_count,
            c.qformer_width,
            c.qformer_heads,
            c.qformer_layers,
            c.d_mem,
            c.d_lm,
        )?
    };
    Ok(Model {
        config: c.clone(),
        store,
        lm,
        text_encoder,
        visual: VisualPath {
            encoder,
            abstractor,
            projection,
        },
        qformer,
    })
}

/// Token ids the text encoder reads for one completed turn.
pub fn turn_memory_ids(question: &str, answer: &str) -> Vec<usize> {
    let mut ids = vec![HUMAN];
    ids.extend(tokenizer::encode(question));
    ids.push(AI);
    ids.extend(tokenizer::encode(answer));
    ids
}

impl Model {
    pub fn param_report(&self, trainable: GroupSet) -> ParamReport {
        let mut groups = Vec::new();
        let (mut frozen, mut train) = (0, 0);
        for (g, n) in self.store.counts() {
            let t = trainable.contains(g);
            if t {
                train += n;
            } else {
                frozen += n;
            }
            groups.push((g, n, t));
        }
        ParamReport {
            groups,
            frozen,
            trainable: train,
        }
    }

    /// `[a, d_lm]` image tokens for one patch matrix.
    pub fn abstract_image(&self, s: &mut Session, patches: &Tensor) -> Result<Var> {
        self.visual.abstract_image(s, patches)
    }

    fn image_rows(
        &self,
        s: &mut Session,
        seq: &TokenSequence,
        images: &dyn ImageLookup,
    ) -> Result<Vec<Var>> {
        let spans = &seq.image_spans;
        if spans.len() != seq.image_refs.len() {
            return Err(Error::Contract(format!(
                "{} image spans but {} image references",
                spans.len(),
                seq.image_refs.len()
            )));
        }
        let mut cache: BTreeMap<&str, Var> = BTreeMap::new();
        let mut out = Vec::with_capacity(spans.len());
        for ((_, len), r) in spans.iter().zip(&seq.image_refs) {
            if *len != self.config.abstractor_queries {
                return Err(Error::Config(format!(
                    "image span of {len} positions, abstractor emits {}",
                    self.config.abstractor_queries
                )));
            }
            let v = match cache.get(r.as_str()) {
                Some(v) => *v,
                None => {
                    let p = images
                        .patches(r)
                        .ok_or_else(|| Error::Contract(format!("unknown image reference `{r}`")))?;
                    let v = self.abstract_image(s, p)?;
                    cache.insert(r, v);
                    v
                }
            };
            out.push(v);
        }
        Ok(out)
    }

    fn prefix(
        &self,
        s: &mut Session,
        seq: &TokenSequence,
        memory: &MemorySnapshot,
        opts: FusionOptions,
    ) -> Result<(Var, usize)> {
        let instr = self.qformer.embed_instruction(s, &seq.instruction)?;
        let out = self.qformer.forward_with(s, instr, memory, opts)?;
        Ok((out.prefix, out.memory_entries_attended))
    }

    /// Embeds ids, splicing pre-computed image rows into the image spans.
    fn embed_sequence(
        &self,
        s: &mut Session,
        ids: &[usize],
        spans: &[(usize, usize)],
        image_rows: &[Var],
    ) -> Result<Var> {
        if spans.len() != image_rows.len() {
            return Err(Error::Contract("image span without image rows".into()));
        }
        let mut pieces = Vec::new();
        let mut pos = 0;
        for (&(start, len), &rows) in spans.iter().zip(image_rows) {
            if start < pos || start + len > ids.len() {
                return Err(Error::Contract(format!(
                    "image span at {start} is out of order"
                )));
            }
            if start > pos {
                pieces.push(self.lm.embed(s, &ids[pos..start])?);
            }
            pieces.push(rows);
            pos = start + len;
        }
        if pos < ids.len() {
            pieces.push(self.lm.embed(s, &ids[pos..])?);
        }
        if pieces.len() == 1 {
            Ok(pieces[0])
        } else {
            s.tape.concat_rows(&pieces)
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_seq_len {
            return Err(Error::Truncation {
                len,
                max: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    /// Next-token logits for `seq`. With `memory = None` the fusion block is
    /// inactive (caption pre-training); with a snapshot (possibly empty) the
    /// fused soft prefix conditions every text position.
    pub fn forward(
        &self,
        s: &mut Session,
        seq: &TokenSequence,
        images: &dyn ImageLookup,
        memory: Option<&MemorySnapshot>,
    ) -> Result<ForwardOutput> {
        self.forward_with(s, seq, images, memory, FusionOptions::default())
    }

    pub fn forward_with(
        &self,
        s: &mut Session,
        seq: &TokenSequence,
        images: &dyn ImageLookup,
        memory: Option<&MemorySnapshot>,
        opts: FusionOptions,
    ) -> Result<ForwardOutput> {
        self.check_len(seq.len())?;
        let rows = self.image_rows(s, seq, images)?;
        let (prefix, attended) = match memory {
            Some(m) => {
                let (p, n) = self.prefix(s, seq, m, opts)?;
                (Some(p), n)
            }
            None => (None, 0),
        };
        let x = self.embed_sequence(s, &seq.ids, &seq.image_spans, &rows)?;
        let logits = self.lm.forward_embedded(s, x, prefix)?;
        Ok(ForwardOutput {
            logits,
            memory_entries_attended: attended,
        })
    }

    /// Masked next-token loss of `seq` (targets shifted by one).
    pub fn loss(
        &self,
        s: &mut Session,
        seq: &TokenSequence,
        images: &dyn ImageLookup,
        memory: Option<&MemorySnapshot>,
    ) -> Result<Var> {
        let out = self.forward(s, seq, images, memory)?;
        let (targets, mask) = seq.shifted_targets();
        s.tape.masked_nll_loss(out.logits, &targets, &mask)
    }

    /// Memory rows for a queue fed with `history`, encoded on the tape so
    /// the encoders receive gradients. Same values and order as
    /// `record_turn` followed by a snapshot; `None` when nothing is stored.
    pub fn memory_rows(
        &self,
        s: &mut Session,
        history: &[TurnText],
        images: &dyn ImageLookup,
    ) -> Result<Option<Var>> {
        let cap = self.config.memory_capacity;
        // newest first, then reversed
        let mut picked: Vec<(&TurnText, Option<&str>)> = Vec::new();
        'turns: for turn in history.iter().rev() {
            if picked.len() == cap {
                break;
            }
            picked.push((turn, None));
            for r in turn.images.iter().rev() {
                if picked.len() == cap {
                    break 'turns;
                }
                picked.push((turn, Some(r.as_str())));
            }
        }
        if picked.is_empty() {
            return Ok(None);
        }
        let mut rows = Vec::with_capacity(picked.len());
        for (turn, image) in picked.into_iter().rev() {
            let row = match image {
                Some(r) => {
                    let p = images
                        .patches(r)
                        .ok_or_else(|| Error::Contract(format!("unknown image reference `{r}`")))?;
                    let enc = self.visual.encoder.forward(s, p)?;
                    self.visual.encoder.to_memory.forward(s, enc.cls)?
                }
                None => {
                    let answer = turn.answer.as_deref().unwrap_or("");
                    self.text_encoder
                        .forward_cls(s, &turn_memory_ids(&turn.question, answer))?
                }
            };
            rows.push(row);
        }
        Ok(Some(if rows.len() == 1 {
            rows[0]
        } else {
            s.tape.concat_rows(&rows)?
        }))
    }

    /// [`Model::loss`] with memory given as tape rows (see [`Model::memory_rows`]).
    pub fn loss_with_rows(
        &self,
        s: &mut Session,
        seq: &TokenSequence,
        images: &dyn ImageLookup,
        memory: Option<Var>,
    ) -> Result<Var> {
        self.check_len(seq.len())?;
        let rows = self.image_rows(s, seq, images)?;
        let instr = self.qformer.embed_instruction(s, &seq.instruction)?;
        let prefix = self.qformer.forward_rows(s, instr, memory)?.prefix;
        let x = self.embed_sequence(s, &seq.ids, &seq.image_spans, &rows)?;
        let logits = self.lm.forward_embedded(s, x, Some(prefix))?;
        let (targets, mask) = seq.shifted_targets();
        s.tape.masked_nll_loss(logits, &targets, &mask)
    }

    /// Decodes up to `max_new_tokens` after `seq`, stopping after `[EOA]`
    /// (which is included in the result) or when the length budget is full.
    pub fn generate(
        &self,
        seq: &TokenSequence,
        images: &dyn ImageLookup,
        memory: Option<&MemorySnapshot>,
        max_new_tokens: usize,
        mode: DecodeMode,
    ) -> Result<Vec<usize>> {
        if max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        self.check_len(seq.len())?;
        // image rows and the prefix do not depend on generated tokens
        let (image_vals, prefix_val) = {
            let mut s = Session::inference(&self.store);
            let rows = self.image_rows(&mut s, seq, images)?;
            let prefix = match memory {
                Some(m) => Some(self.prefix(&mut s, seq, m, FusionOptions::default())?.0),
                None => None,
            };
            (
                rows.iter()
                    .map(|&v| s.tape.value(v).clone())
                    .collect::<Vec<_>>(),
                prefix.map(|v| s.tape.value(v).clone()),
            )
        };
        let mut rng = match mode {
            DecodeMode::Temperature { temperature, seed } => {
                if !(temperature.is_finite() && temperature > 0.0) {
                    return Err(Error::Config(format!(
                        "temperature must be positive, got {temperature}"
                    )));
                }
                Some(ChaCha8Rng::seed_from_u64(seed))
            }
            DecodeMode::Greedy => None,
        };

        let mut ids = seq.ids.clone();
        let mut out = Vec::new();
        while out.len() < max_new_tokens && ids.len() < self.config.max_seq_len + 1 {
            let mut s = Session::inference(&self.store);
            let rows: Vec<Var> = image_vals
                .iter()
                .map(|t| s.tape.constant(t.clone()))
                .collect();
            let prefix = prefix_val.as_ref().map(|t| s.tape.constant(t.clone()));
            let x = self.embed_sequence(&mut s, &ids, &seq.image_spans, &rows)?;
            let logits = self.lm.forward_embedded(&mut s, x, prefix)?;
            let lv = s.tape.value(logits);
            let last = lv.row(lv.rows() - 1);
            let next = match (&mut rng, mode) {
                (Some(r), DecodeMode::Temperature { temperature, .. }) => {
                    sample(last, temperature, r)
                }
                _ => argmax(last),
            };
            out.push(next);
            if next == EOA || ids.len() == self.config.max_seq_len {
                break;
            }
            ids.push(next);
        }
        Ok(out)
    }

    /// Memory embedding of a completed turn.
    pub fn encode_turn(&self, question: &str, answer: &str) -> Result<Vec<f64>> {
        self.text_encoder
            .encode_turn_cls(&self.store, &turn_memory_ids(question, answer))
    }

    pub fn encode_image(&self, patches: &Tensor) -> Result<Vec<f64>> {
        self.visual.encoder.encode_image_cls(&self.store, patches)
    }

    /// Enqueues a completed turn: its images first, then the turn text.
    pub fn record_turn(
        &self,
        queue: &mut MemoryQueue,
        dialogue_id: &str,
        turn_index: usize,
        turn: &TurnText,
        images: &dyn ImageLookup,
    ) -> Result<()> {
        if queue.capacity() == 0 {
            return Ok(());
        }
        for r in &turn.images {
            let p = images
                .patches(r)
                .ok_or_else(|| Error::Contract(format!("unknown image reference `{r}`")))?;
            let e = MemoryEntry::new(
                self.encode_image(p)?,
                EntryKind::Image,
                turn_index,
                dialogue_id,
            )?;
            queue.enqueue(e)?;
        }
        let answer = turn.answer.as_deref().unwrap_or("");
        let e = MemoryEntry::new(
            self.encode_turn(&turn.question, answer)?,
            EntryKind::TextTurn,
            turn_index,
            dialogue_id,
        )?;
        queue.enqueue(e)?;
        Ok(())
    }

    pub fn new_queue(&self) -> MemoryQueue {
        MemoryQueue::new(self.config.memory_capacity, self.config.d_mem)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample<R: Rng>(row: &[f64], temperature: f64, rng: &mut R) -> usize {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = row
        .iter()
        .map(|v| ((v - max) / temperature).exp())
        .collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    row.len() - 1
}
