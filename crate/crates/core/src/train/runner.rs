use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{lr_at, Stage, TrainConfig};
use super::optim::OptimizerState;
use super::steps::{
    base_loss, base_step, caption_loss, dialogue_loss, finetune_step, pretrain_step, StepStats,
};
use crate::checkpoint::Checkpoint;
use crate::data::{CaptionPair, Dialogue};
use crate::error::{Error, Result};
use crate::model::Model;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint.json";

pub enum TrainData {
    Captions(Vec<CaptionPair>),
    Dialogues(Vec<Dialogue>),
}

impl TrainData {
    fn len(&self) -> usize {
        match self {
            TrainData::Captions(v) => v.len(),
            TrainData::Dialogues(v) => v.len(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Checkpoint to continue from; its parameters, optimizer moments,
    /// sampler state and step replace the fresh ones.
    pub resume: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub model: Model,
    /// Records written by this run (after the resume point, if any).
    pub log: Vec<LogRecord>,
    pub checkpoint: PathBuf,
    pub eval_loss: f64,
}

fn eval_loss(model: &Model, data: &TrainData, cfg: &TrainConfig) -> Result<f64> {
    let n = cfg.eval_samples.min(data.len()).max(1);
    let mut total = 0.0;
    for i in 0..n {
        total += match data {
            TrainData::Captions(v) => caption_loss(model, &v[i])?,
            TrainData::Dialogues(v) if cfg.stage == Stage::Base => base_loss(model, &v[i])?,
            TrainData::Dialogues(v) => dialogue_loss(model, &v[i], cfg.loss_turns)?,
        };
    }
    Ok(total / n as f64)
}

fn checkpoint(
    model: &Model,
    cfg: &TrainConfig,
    step: u64,
    opt: &OptimizerState,
    rng: &ChaCha8Rng,
    eval: f64,
) -> Checkpoint {
    let mut ck = Checkpoint::from_model(model, cfg.trainable());
    ck.stage = Some(cfg.stage);
    ck.train_config = Some(cfg.clone());
    ck.step = step;
    ck.optimizer = Some(opt.clone());
    ck.rng = Some(rng.clone());
    ck.eval_loss = Some(eval);
    ck
}

/// Reads a line-delimited training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Runs `cfg.iterations` updates, logging every step and checkpointing at
/// the configured cadence plus once at the end.
pub fn train(
    mut model: Model,
    cfg: &TrainConfig,
    data: &TrainData,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    match (cfg.stage, data) {
        (Stage::Pretrain, TrainData::Captions(_))
        | (Stage::Base | Stage::Finetune, TrainData::Dialogues(_)) => {}
        (stage, _) => {
            return Err(Error::Config(format!(
                "{} stage was given the wrong kind of data",
                stage.name()
            )));
        }
    }
    if data.len() == 0 {
        return Err(Error::EmptyInput("training data"));
    }
    fs::create_dir_all(&opts.out_dir)
        .map_err(|e| Error::io(format!("creating {}", opts.out_dir.display()), e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut step = 0;
    let log_path = opts.out_dir.join(LOG_FILE);
    let mut kept = Vec::new();
    if let Some(path) = &opts.resume {
        let ck = Checkpoint::load(path)?;
        if ck.stage != Some(cfg.stage) {
            return Err(Error::Checkpoint(format!(
                "{} was written by a different stage",
                path.display()
            )));
        }
        model = ck.to_model()?;
        opt = ck
            .optimizer
            .ok_or_else(|| Error::Checkpoint("resume checkpoint has no optimizer state".into()))?;
        opt.check_against(&model.store)?;
        rng = ck
            .rng
            .ok_or_else(|| Error::Checkpoint("resume checkpoint has no sampler state".into()))?;
        step = ck.step;
        // earlier records come from this directory's log, or from the log
        // beside the checkpoint when resuming into a fresh directory
        let prior = [log_path.clone(), path.with_file_name(LOG_FILE)];
        if let Some(p) = prior.iter().find(|p| p.exists()) {
            kept = read_log(p)?
                .into_iter()
                .filter(|r| r.step <= step)
                .collect();
        }
    }
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&log_path)
        .map_err(|e| Error::io(format!("opening {}", log_path.display()), e))?;
    let mut log_w = BufWriter::new(file);
    let write_rec = |w: &mut BufWriter<File>, r: &LogRecord| -> Result<()> {
        let line = serde_json::to_string(r)?;
        writeln!(w, "{line}").map_err(|e| Error::io("writing training log", e))
    };
    for r in &kept {
        write_rec(&mut log_w, r)?;
    }

    let mut log = Vec::new();
    let n = data.len();
    while step < cfg.iterations {
        let s = step + 1;
        let lr = lr_at(s, cfg);
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..n))
            .collect();
        let st: StepStats = match data {
            TrainData::Captions(v) => {
                let batch: Vec<&CaptionPair> = idx.iter().map(|&i| &v[i]).collect();
                pretrain_step(&mut model, &mut opt, &batch, lr, cfg)?
            }
            TrainData::Dialogues(v) => {
                let batch: Vec<&Dialogue> = idx.iter().map(|&i| &v[i]).collect();
                if cfg.stage == Stage::Base {
                    base_step(&mut model, &mut opt, &batch, lr, cfg)?
                } else {
                    finetune_step(&mut model, &mut opt, &batch, lr, cfg)?
                }
            }
        };
        step = s;
        let rec = LogRecord {
            step,
            lr,
            loss: st.loss,
            grad_norm: st.grad_norm,
        };
        log::debug!(
            "step {step} lr {lr:.3e} loss {:.5} grad_norm {:.4}",
            st.loss,
            st.grad_norm
        );
        write_rec(&mut log_w, &rec)?;
        log.push(rec);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.iterations {
            log_w
                .flush()
                .map_err(|e| Error::io("writing training log", e))?;
            let e = eval_loss(&model, data, cfg)?;
            checkpoint(&model, cfg, step, &opt, &rng, e)
                .save(&opts.out_dir.join(format!("checkpoint-{step}.json")))?;
        }
    }
    log_w
        .flush()
        .map_err(|e| Error::io("writing training log", e))?;

    let e = eval_loss(&model, data, cfg)?;
    let path = opts.out_dir.join(FINAL_CHECKPOINT);
    checkpoint(&model, cfg, step, &opt, &rng, e).save(&path)?;
    log::info!(
        "{} finished at step {step}, eval loss {e:.5}",
        cfg.stage.name()
    );
    Ok(TrainOutcome {
        model,
        log,
        checkpoint: path,
        eval_loss: e,
    })
}
