//! Memory ablation on planted-fact recall.
//!
//! A base LM is trained first and shared by both arms. Each arm is then
//! fine-tuned from it, one with the memory queue and one with capacity 0
//! (LoRA only), and both are scored on facts planted further back than the
//! prompt window holds (`far`) and on facts still inside it (`near`).

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::recall::{recall_benchmark, RecallReport};
use crate::data::{generate_corpus, Category, CorpusConfig, Dialogue};
use crate::error::{Error, Result};
use crate::model::{build_model, LossTurns, Model, ModelConfig};
use crate::train::{train, RunOptions, TrainConfig, TrainData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub base: TrainConfig,
    pub finetune: TrainConfig,
    pub base_dialogues: usize,
    pub train_dialogues: usize,
    /// Share of training dialogues whose fact stays inside the window.
    pub near_fraction: f64,
    pub eval_dialogues: usize,
    pub near_gaps: (usize, usize),
    pub far_train_gaps: (usize, usize),
    pub far_eval_gaps: (usize, usize),
}

impl Default for AblationConfig {
    fn default() -> Self {
        let model = ModelConfig {
            d_lm: 64,
            lm_heads: 4,
            lm_layers: 2,
            max_seq_len: 96,
            memory_capacity: 10,
            lora_rank: 8,
            lora_alpha: 16.0,
            ..ModelConfig::small()
        };
        let base = TrainConfig {
            iterations: 600,
            batch_size: 8,
            peak_lr: 2e-3,
            warmup_steps: 60,
            checkpoint_every: 0,
            eval_samples: 1,
            ..TrainConfig::base()
        };
        let finetune = TrainConfig {
            iterations: 600,
            batch_size: 8,
            peak_lr: 2e-3,
            warmup_steps: 60,
            weight_decay: 0.0,
            loss_turns: LossTurns::Final,
            checkpoint_every: 0,
            eval_samples: 1,
            ..TrainConfig::finetune()
        };
        Self {
            seed: 0,
            model,
            base,
            finetune,
            base_dialogues: 1200,
            train_dialogues: 4800,
            near_fraction: 1.0 / 3.0,
            eval_dialogues: 200,
            near_gaps: (1, 2),
            far_train_gaps: (3, 8),
            far_eval_gaps: (4, 8),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub memory_capacity: usize,
    pub far: RecallReport,
    pub near: RecallReport,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub memory_on: ArmReport,
    pub memory_off: ArmReport,
    pub far_gap: f64,
    pub seconds: f64,
}

impl AblationReport {
    pub fn summary(&self) -> String {
        let row = |name: &str, a: &ArmReport| {
            format!(
                "{name:<10} capacity {:>2}  far {:.3} ({}/{}, {} outside window)  near {:.3} ({}/{}, {} outside window)\n",
                a.memory_capacity,
                a.far.accuracy,
                a.far.correct,
                a.far.total,
                a.far.fact_out_of_window,
                a.near.accuracy,
                a.near.correct,
                a.near.total,
                a.near.fact_out_of_window
            )
        };
        format!(
            "{}{}far gap {:+.3} in {:.1}s\n",
            row("memory", &self.memory_on),
            row("lora-only", &self.memory_off),
            self.far_gap,
            self.seconds
        )
    }
}

/// Long-memory dialogues with gaps drawn from `gaps`.
fn taskset(
    seed: u64,
    count: usize,
    gaps: (usize, usize),
    cfg: &AblationConfig,
) -> Result<Vec<Dialogue>> {
    let c = CorpusConfig {
        count,
        d_img: cfg.model.d_img,
        min_gap: gaps.0,
        max_gap: gaps.1,
        ..CorpusConfig::default()
    };
    generate_corpus(Category::LongMemory, seed, &c)
}

fn mixed(
    seed: u64,
    count: usize,
    far: (usize, usize),
    cfg: &AblationConfig,
) -> Result<Vec<Dialogue>> {
    let near = ((count as f64 * cfg.near_fraction).round() as usize).min(count);
    let mut out = Vec::with_capacity(count);
    if near > 0 {
        out.extend(taskset(seed, near, cfg.near_gaps, cfg)?);
    }
    if count > near {
        out.extend(taskset(seed + 1, count - near, far, cfg)?);
    }
    Ok(out)
}

fn arm(
    base: &Model,
    capacity: usize,
    data: &TrainData,
    far: &[Dialogue],
    near: &[Dialogue],
    cfg: &AblationConfig,
    out: &Path,
) -> Result<ArmReport> {
    let mut model = base.clone();
    model.config.memory_capacity = capacity;
    let run = train(
        model,
        &cfg.finetune,
        data,
        &RunOptions {
            out_dir: out.to_path_buf(),
            resume: None,
        },
    )?;
    let on = capacity > 0;
    Ok(ArmReport {
        memory_capacity: capacity,
        far: recall_benchmark(&run.model, on, far)?,
        near: recall_benchmark(&run.model, on, near)?,
        final_loss: run.log.last().map_or(f64::NAN, |r| r.loss),
    })
}

/// Trains the shared base LM and both arms under `out`, then scores them.
pub fn run_ablation(cfg: &AblationConfig, out: &Path) -> Result<AblationReport> {
    if cfg.model.memory_capacity == 0 {
        return Err(Error::Config(
            "the memory arm needs a nonzero capacity".into(),
        ));
    }
    if cfg.eval_dialogues == 0 {
        return Err(Error::EmptyInput("ablation evaluation set"));
    }
    let started = Instant::now();
    let mut model_cfg = cfg.model.clone();
    model_cfg.seed = cfg.seed;
    let mut base_cfg = cfg.base.clone();
    base_cfg.seed = cfg.seed;
    let mut ft = cfg.clone();
    ft.finetune.seed = cfg.seed;

    // disjoint seed ranges per split
    let s = cfg.seed.wrapping_mul(10);
    let base_data = TrainData::Dialogues(mixed(s, cfg.base_dialogues, cfg.far_train_gaps, cfg)?);
    let train_data =
        TrainData::Dialogues(mixed(s + 2, cfg.train_dialogues, cfg.far_train_gaps, cfg)?);
    let far = taskset(s + 4, cfg.eval_dialogues, cfg.far_eval_gaps, cfg)?;
    let near = taskset(s + 5, cfg.eval_dialogues, cfg.near_gaps, cfg)?;

    let base = train(
        build_model(&model_cfg)?,
        &base_cfg,
        &base_data,
        &RunOptions {
            out_dir: out.join("base"),
            resume: None,
        },
    )?;
    log::info!("base LM trained in {:.1}s", started.elapsed().as_secs_f64());
    let memory_on = arm(
        &base.model,
        model_cfg.memory_capacity,
        &train_data,
        &far,
        &near,
        &ft,
        &out.join("memory_on"),
    )?;
    log::info!(
        "memory arm: far {:.3} near {:.3}",
        memory_on.far.accuracy,
        memory_on.near.accuracy
    );
    let memory_off = arm(
        &base.model,
        0,
        &train_data,
        &far,
        &near,
        &ft,
        &out.join("memory_off"),
    )?;
    log::info!(
        "lora-only arm: far {:.3} near {:.3}",
        memory_off.far.accuracy,
        memory_off.near.accuracy
    );
    Ok(AblationReport {
        far_gap: memory_on.far.accuracy - memory_off.far.accuracy,
        memory_on,
        memory_off,
        seconds: started.elapsed().as_secs_f64(),
    })
}
