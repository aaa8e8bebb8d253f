use std::collections::BTreeMap;

use super::config::TrainConfig;
use super::optim::{GradBuffer, OptimizerState};
use crate::data::{CaptionPair, Dialogue};
use crate::error::{Error, Result};
use crate::model::{
    assemble_dialogue_prompt, assemble_pretrain_prompt, LossTurns, Model, TurnText,
};
use crate::params::{GroupSet, Session};
use crate::tensor::Tensor;

const IMAGE_REF: &str = "image";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Mean loss and summed, already-averaged gradients of one batch.
pub struct BatchGrads {
    pub loss: f64,
    pub grads: GradBuffer,
}

fn caption_seq(
    model: &Model,
    pair: &CaptionPair,
) -> Result<(crate::model::TokenSequence, BTreeMap<String, Tensor>)> {
    let seq = assemble_pretrain_prompt(
        &pair.caption,
        IMAGE_REF,
        model.config.abstractor_queries,
        model.config.max_seq_len,
    )?;
    let images = BTreeMap::from([(IMAGE_REF.to_string(), pair.patches.clone())]);
    Ok((seq, images))
}

/// Caption loss of one pair without gradients.
pub fn caption_loss(model: &Model, pair: &CaptionPair) -> Result<f64> {
    let (seq, images) = caption_seq(model, pair)?;
    let mut s = Session::inference(&model.store);
    let l = model.loss(&mut s, &seq, &images, None)?;
    Ok(s.tape.value(l).item())
}

fn caption_grads(model: &Model, batch: &[&CaptionPair], trainable: GroupSet) -> Result<BatchGrads> {
    let mut grads = GradBuffer::new();
    let mut total = 0.0;
    let w = 1.0 / batch.len() as f64;
    for pair in batch {
        let (seq, images) = caption_seq(model, pair)?;
        let mut s = Session::new(&model.store, trainable);
        let l = model.loss(&mut s, &seq, &images, None)?;
        total += s.tape.value(l).item();
        s.tape.backward(l)?;
        grads.add(s.gradients(), w);
    }
    Ok(BatchGrads {
        loss: total * w,
        grads,
    })
}

fn trained_turns(d: &Dialogue, which: LossTurns) -> Vec<usize> {
    match which {
        LossTurns::All => (0..d.turns.len()).collect(),
        LossTurns::Final => vec![d.turns.len() - 1],
    }
}

/// Walks the trained turns of one dialogue. Each gets memory holding the
/// turns before it (encoded on the same tape, so the memory encoders learn)
/// and a prompt with only the current answer unmasked. `visit` receives
/// each scored turn's session and loss.
fn walk_dialogue(
    model: &Model,
    d: &Dialogue,
    which: LossTurns,
    trainable: GroupSet,
    mut visit: impl FnMut(Session<'_>, crate::tensor::Var) -> Result<()>,
) -> Result<()> {
    let texts: Vec<TurnText> = d.turn_texts();
    for i in trained_turns(d, which) {
        let (seq, _) = assemble_dialogue_prompt(
            &texts[..i],
            &texts[i],
            model.config.abstractor_queries,
            model.config.max_seq_len,
            LossTurns::Final,
        )?;
        let mut s = Session::new(&model.store, trainable);
        let memory = model.memory_rows(&mut s, &texts[..i], d)?;
        let l = model.loss_with_rows(&mut s, &seq, d, memory)?;
        visit(s, l)?;
    }
    Ok(())
}

/// Whole dialogue as one sequence with every answer in the loss, history
/// dropped oldest-first to fit the window.
fn full_dialogue_seq(model: &Model, d: &Dialogue) -> Result<crate::model::TokenSequence> {
    let texts = d.turn_texts();
    let (last, history) = texts.split_last().ok_or(Error::EmptyInput("dialogue"))?;
    let (seq, _) = assemble_dialogue_prompt(
        history,
        last,
        model.config.abstractor_queries,
        model.config.max_seq_len,
        LossTurns::All,
    )?;
    Ok(seq)
}

/// Base language-model loss of one dialogue without gradients.
pub fn base_loss(model: &Model, d: &Dialogue) -> Result<f64> {
    let seq = full_dialogue_seq(model, d)?;
    let mut s = Session::inference(&model.store);
    let l = model.loss(&mut s, &seq, d, None)?;
    Ok(s.tape.value(l).item())
}

fn base_grads(model: &Model, batch: &[&Dialogue], trainable: GroupSet) -> Result<BatchGrads> {
    let mut grads = GradBuffer::new();
    let mut total = 0.0;
    let w = 1.0 / batch.len() as f64;
    for d in batch {
        let seq = full_dialogue_seq(model, d)?;
        let mut s = Session::new(&model.store, trainable);
        let l = model.loss(&mut s, &seq, *d, None)?;
        total += s.tape.value(l).item();
        s.tape.backward(l)?;
        grads.add(s.gradients(), w);
    }
    Ok(BatchGrads {
        loss: total * w,
        grads,
    })
}

/// Mean per-turn loss of one dialogue without gradients.
pub fn dialogue_loss(model: &Model, d: &Dialogue, which: LossTurns) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    walk_dialogue(model, d, which, GroupSet::none(), |s, l| {
        total += s.tape.value(l).item();
        n += 1;
        Ok(())
    })?;
    Ok(total / n.max(1) as f64)
}

/// Gradients of the mean loss over every trained (dialogue, turn) unit.
pub fn dialogue_grads(
    model: &Model,
    batch: &[&Dialogue],
    which: LossTurns,
    trainable: GroupSet,
) -> Result<BatchGrads> {
    let units: usize = batch.iter().map(|d| trained_turns(d, which).len()).sum();
    if units == 0 {
        return Err(Error::EmptyInput("fine-tuning batch"));
    }
    let w = 1.0 / units as f64;
    let mut grads = GradBuffer::new();
    let mut total = 0.0;
    for d in batch {
        walk_dialogue(model, d, which, trainable, |mut s, l| {
            total += s.tape.value(l).item();
            s.tape.backward(l)?;
            grads.add(s.gradients(), w);
            Ok(())
        })?;
    }
    Ok(BatchGrads {
        loss: total * w,
        grads,
    })
}

fn apply(
    model: &mut Model,
    opt: &mut OptimizerState,
    b: BatchGrads,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    if !b.loss.is_finite() {
        return Err(Error::Divergence {
            step: opt.step + 1,
            lr,
            grad_norm: b.grads.global_norm(),
        });
    }
    let grad_norm = opt.apply(&mut model.store, b.grads, lr, cfg)?;
    Ok(StepStats {
        loss: b.loss,
        grad_norm,
        lr,
    })
}

/// One stage-1 update: image encoder, abstractor and projection learn to
/// caption through the frozen LM.
pub fn pretrain_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    batch: &[&CaptionPair],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("pre-training batch"));
    }
    let b = caption_grads(model, batch, cfg.trainable())?;
    apply(model, opt, b, lr, cfg)
}

/// One base-LM update: next-token loss on every answer of each dialogue.
pub fn base_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    batch: &[&Dialogue],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("base training batch"));
    }
    let b = base_grads(model, batch, cfg.trainable())?;
    apply(model, opt, b, lr, cfg)
}

/// One stage-2 update over a batch of dialogues.
pub fn finetune_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    batch: &[&Dialogue],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("fine-tuning batch"));
    }
    let b = dialogue_grads(model, batch, cfg.loss_turns, cfg.trainable())?;
    apply(model, opt, b, lr, cfg)
}
