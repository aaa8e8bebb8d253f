//! Training stages: base language modelling, caption alignment, then
//! memory-conditioned multi-turn fine-tuning.

mod config;
mod optim;
mod runner;
mod steps;

pub use config::{lr_at, OptimizerKind, Stage, TrainConfig};
pub use optim::{GradBuffer, Moments, OptimizerState};
pub use runner::{
    read_log, train, LogRecord, RunOptions, TrainData, TrainOutcome, FINAL_CHECKPOINT, LOG_FILE,
};
pub use steps::{
    base_loss, base_step, caption_loss, dialogue_grads, dialogue_loss, finetune_step,
    pretrain_step, BatchGrads, StepStats,
};
