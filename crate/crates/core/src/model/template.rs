//! Prompt templates and loss masks.
//!
//! Caption pre-training uses `Human:<ImageFeature> AI:<Caption>`; dialogue
//! turns use `Human:<ImageFeature><Question>AI:<Answer>`, repeated once per
//! turn. Every answer is closed by `[EOA]`, and the loss mask is set exactly
//! on answer bytes plus that terminator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{self, AI, BOS, EOA, HUMAN, IMAGE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Text,
    ImageFeature,
    SoftPrefix,
}

/// Assembled prompt: token ids, per-position loss mask and segment tags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub loss_mask: Vec<bool>,
    pub segments: Vec<Segment>,
    /// Image references in order of their feature spans.
    pub image_refs: Vec<String>,
    /// `(start, len)` of each image feature span, parallel to `image_refs`.
    pub image_spans: Vec<(usize, usize)>,
    /// The current instruction (question bytes) that conditions the fusion
    /// block. Empty for caption pre-training.
    pub instruction: Vec<usize>,
}

impl TokenSequence {
    fn new() -> Self {
        Self {
            ids: vec![BOS],
            loss_mask: vec![false],
            segments: vec![Segment::Text],
            image_refs: Vec::new(),
            image_spans: Vec::new(),
            instruction: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn push(&mut self, id: usize, masked: bool) {
        self.ids.push(id);
        self.loss_mask.push(masked);
        self.segments.push(Segment::Text);
    }

    fn push_text(&mut self, ids: &[usize], masked: bool) {
        for &id in ids {
            self.push(id, masked);
        }
    }

    fn push_image(&mut self, image_ref: &str, len: usize) {
        self.image_spans.push((self.ids.len(), len));
        for _ in 0..len {
            self.ids.push(IMAGE);
            self.loss_mask.push(false);
            self.segments.push(Segment::ImageFeature);
        }
        self.image_refs.push(image_ref.to_string());
    }

    /// Appends one generated token (never part of the loss).
    pub fn push_generated(&mut self, id: usize) {
        self.push(id, false);
    }

    pub fn mask_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Next-token targets and mask: position `k` predicts token `k + 1`.
    pub fn shifted_targets(&self) -> (Vec<usize>, Vec<bool>) {
        let n = self.ids.len();
        let mut targets = vec![0; n];
        let mut mask = vec![false; n];
        if n > 1 {
            targets[..n - 1].copy_from_slice(&self.ids[1..]);
            mask[..n - 1].copy_from_slice(&self.loss_mask[1..]);
        }
        (targets, mask)
    }

    /// Text rendering with role markers and `<ImageFeature>` spans.
    pub fn render(&self) -> String {
        tokenizer::decode(&self.ids)
    }

    /// Concatenated text of the masked positions, terminators dropped.
    pub fn masked_text(&self) -> String {
        let ids: Vec<usize> = self
            .ids
            .iter()
            .zip(&self.loss_mask)
            .filter(|(_, &m)| m)
            .map(|(&i, _)| i)
            .collect();
        tokenizer::decode_text(&ids)
    }
}

/// One dialogue turn as text.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TurnText {
    pub question: String,
    pub answer: Option<String>,
    #[serde(default)]
    pub images: Vec<String>,
}

impl TurnText {
    pub fn new(question: impl Into<String>, answer: Option<&str>) -> Self {
        Self {
            question: question.into(),
            answer: answer.map(str::to_string),
            images: Vec::new(),
        }
    }

    pub fn with_images(mut self, images: Vec<String>) -> Self {
        self.images = images;
        self
    }
}

/// Which answers contribute to the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTurns {
    /// Every answer in the assembled prompt.
    #[default]
    All,
    /// Only the current turn's answer.
    Final,
}

/// Record of history turns dropped to fit the length budget.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TruncationReport {
    pub dropped_turns: usize,
}

pub fn assemble_pretrain_prompt(
    caption: &str,
    image_ref: &str,
    image_len: usize,
    max_len: usize,
) -> Result<TokenSequence> {
    if caption.is_empty() {
        return Err(Error::EmptyInput("caption"));
    }
    let mut seq = TokenSequence::new();
    seq.push(HUMAN, false);
    seq.push_image(image_ref, image_len);
    seq.push(b' ' as usize, false);
    seq.push(AI, false);
    seq.push_text(&tokenizer::encode(caption), true);
    seq.push(EOA, true);
    if seq.len() > max_len {
        return Err(Error::Truncation {
            len: seq.len(),
            max: max_len,
        });
    }
    Ok(seq)
}

fn turn_len(turn: &TurnText, image_len: usize, with_answer: bool) -> usize {
    let answer = if with_answer {
        turn.answer.as_ref().map_or(0, |a| a.len() + 1)
    } else {
        0
    };
    2 + turn.images.len() * image_len + turn.question.len() + answer
}

fn push_turn(
    seq: &mut TokenSequence,
    turn: &TurnText,
    image_len: usize,
    with_answer: bool,
    masked: bool,
) {
    seq.push(HUMAN, false);
    for r in &turn.images {
        seq.push_image(r, image_len);
    }
    seq.push_text(&tokenizer::encode(&turn.question), false);
    seq.push(AI, false);
    if with_answer {
        if let Some(a) = &turn.answer {
            seq.push_text(&tokenizer::encode(a), masked);
            seq.push(EOA, masked);
        }
    }
}

/// Assembles history turns plus the current turn.
///
/// When the current turn carries an answer it is appended (training);
/// otherwise the sequence ends at `AI:` (generation). History turns are
/// dropped oldest-first until the sequence fits `max_len`.
pub fn assemble_dialogue_prompt(
    history: &[TurnText],
    current: &TurnText,
    image_len: usize,
    max_len: usize,
    loss: LossTurns,
) -> Result<(TokenSequence, TruncationReport)> {
    if current.question.is_empty() {
        return Err(Error::EmptyInput("current question"));
    }
    let current_len = turn_len(current, image_len, true);
    let mut total = 1 + current_len;
    if total > max_len {
        return Err(Error::Truncation {
            len: total,
            max: max_len,
        });
    }
    // keep the longest suffix of history that fits
    let mut keep_from = history.len();
    while keep_from > 0 {
        let l = turn_len(&history[keep_from - 1], image_len, true);
        if total + l > max_len {
            break;
        }
        total += l;
        keep_from -= 1;
    }
    let report = TruncationReport {
        dropped_turns: keep_from,
    };
    if keep_from > 0 {
        log::debug!("dropped {keep_from} oldest turn(s) to fit {max_len} tokens");
    }

    let mut seq = TokenSequence::new();
    let train_history = loss == LossTurns::All;
    for turn in &history[keep_from..] {
        push_turn(&mut seq, turn, image_len, true, train_history);
    }
    push_turn(&mut seq, current, image_len, true, true);
    seq.instruction = tokenizer::encode(&current.question);
    debug_assert_eq!(seq.len(), total);
    Ok((seq, report))
}
