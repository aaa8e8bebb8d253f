use serde::{Deserialize, Serialize};

use crate::data::Dialogue;
use crate::error::{Error, Result};
use crate::memory::MemoryQueue;
use crate::model::{assemble_dialogue_prompt, DecodeMode, LossTurns, Model, TurnText};
use crate::tokenizer::{self, EOA};

/// Room left after the prompt for the generated answer.
const MAX_ANSWER_TOKENS: usize = 12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecallOutcome {
    pub dialogue_id: String,
    pub gap: usize,
    pub gold: String,
    pub predicted: String,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub memory_on: bool,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Query turns whose planted fact was cut from the prompt.
    pub fact_out_of_window: usize,
    pub outcomes: Vec<RecallOutcome>,
}

/// Exact-match recall on the query turn of every dialogue. History turns
/// are teacher-forced and enqueued into memory; `memory_on = false`
/// runs the same model with a capacity-0 queue.
pub fn recall_benchmark(
    model: &Model,
    memory_on: bool,
    taskset: &[Dialogue],
) -> Result<RecallReport> {
    if taskset.is_empty() {
        return Err(Error::EmptyInput("recall taskset"));
    }
    let cfg = &model.config;
    let mut outcomes = Vec::with_capacity(taskset.len());
    let mut out_of_window = 0;
    for d in taskset {
        let key = d
            .answer_key
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("dialogue `{}` has no answer key", d.id)))?;
        for img in d.images.values() {
            if img.patches.cols() != cfg.d_img {
                return Err(Error::shape(
                    "recall_benchmark",
                    img.patches.shape(),
                    &[cfg.d_img],
                ));
            }
        }
        let mut queue = if memory_on {
            model.new_queue()
        } else {
            MemoryQueue::new(0, cfg.d_mem)
        };
        let texts: Vec<TurnText> = d.turn_texts();
        for (i, t) in texts[..key.query_turn].iter().enumerate() {
            model.record_turn(&mut queue, &d.id, i, t, d)?;
        }
        let current = d.turns[key.query_turn].prompt();
        let (seq, report) = assemble_dialogue_prompt(
            &texts[..key.query_turn],
            &current,
            cfg.abstractor_queries,
            cfg.max_seq_len.saturating_sub(MAX_ANSWER_TOKENS),
            LossTurns::Final,
        )?;
        if report.dropped_turns > key.fact_turn {
            out_of_window += 1;
        }
        let snapshot = queue.snapshot();
        let ids = model.generate(
            &seq,
            d,
            Some(&snapshot),
            MAX_ANSWER_TOKENS,
            DecodeMode::Greedy,
        )?;
        let end = ids.iter().position(|&i| i == EOA).unwrap_or(ids.len());
        let predicted = tokenizer::decode_text(&ids[..end]);
        let correct = predicted.trim() == key.answer;
        outcomes.push(RecallOutcome {
            dialogue_id: d.id.clone(),
            gap: key.query_turn - key.fact_turn,
            gold: key.answer.clone(),
            predicted,
            correct,
        });
    }
    let correct = outcomes.iter().filter(|o| o.correct).count();
    Ok(RecallReport {
        memory_on,
        total: outcomes.len(),
        correct,
        accuracy: correct as f64 / outcomes.len() as f64,
        fact_out_of_window: out_of_window,
        outcomes,
    })
}
