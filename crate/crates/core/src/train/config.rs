use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LossTurns;
use crate::params::{GroupSet, ParamGroup};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Language modelling on dialogue text with every LM weight trainable.
    /// Produces the base LM that later stages freeze.
    Base,
    /// Caption alignment: visual modules learn to feed the frozen LM.
    Pretrain,
    /// Multi-turn instruction tuning with the memory queue.
    Finetune,
}

impl Stage {
    /// Groups updated in this stage. `train_visual` keeps the visual
    /// modules trainable during fine-tuning.
    pub fn trainable(self, train_visual: bool) -> GroupSet {
        let visual = [
            ParamGroup::ImageEncoder,
            ParamGroup::Abstractor,
            ParamGroup::Projection,
        ];
        match self {
            Stage::Base => GroupSet::base_lm(),
            Stage::Pretrain => GroupSet::of(&visual),
            Stage::Finetune => {
                let mut g = GroupSet::of(&[
                    ParamGroup::Lora,
                    ParamGroup::ContextQFormer,
                    ParamGroup::TextEncoder,
                ]);
                if train_visual {
                    for v in visual {
                        g = g.with(v);
                    }
                }
                g
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// L2 penalty folded into the gradient.
    Adam,
    /// Decoupled weight decay.
    AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub iterations: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Leading samples of the dataset scored for `eval_loss` at each checkpoint.
    pub eval_samples: usize,
    pub loss_turns: LossTurns,
    /// Keep image encoder, abstractor and projection trainable in fine-tuning.
    pub train_visual: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            iterations: 2000,
            batch_size: 4,
            peak_lr: 5e-5,
            warmup_steps: 250,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            checkpoint_every: 500,
            eval_samples: 8,
            loss_turns: LossTurns::All,
            train_visual: false,
        }
    }

    pub fn finetune() -> Self {
        Self {
            stage: Stage::Finetune,
            iterations: 1000,
            peak_lr: 2e-5,
            warmup_steps: 180,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.01,
            ..Self::pretrain()
        }
    }

    pub fn base() -> Self {
        Self {
            stage: Stage::Base,
            iterations: 1000,
            batch_size: 8,
            peak_lr: 1e-3,
            warmup_steps: 100,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.0,
            ..Self::pretrain()
        }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Base => Self::base(),
            Stage::Pretrain => Self::pretrain(),
            Stage::Finetune => Self::finetune(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return err(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if self.warmup_steps > self.iterations && self.iterations > 0 {
            return err(format!(
                "warmup_steps {} exceeds iterations {}",
                self.warmup_steps, self.iterations
            ));
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("betas must lie in [0, 1)".into());
        }
        if self.adam_eps.is_nan()
            || self.adam_eps <= 0.0
            || self.weight_decay < 0.0
            || self.grad_clip < 0.0
        {
            return err(
                "adam_eps must be positive; weight_decay and grad_clip non-negative".into(),
            );
        }
        Ok(())
    }

    pub fn trainable(&self) -> GroupSet {
        self.stage.trainable(self.train_visual)
    }
}

/// Linear warmup to `peak_lr`, then cosine decay to zero at `iterations`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let peak = cfg.peak_lr;
    let (w, n) = (cfg.warmup_steps, cfg.iterations);
    if step < w {
        return peak * step as f64 / w as f64;
    }
    if n <= w {
        return peak;
    }
    let t = (step.min(n) - w) as f64 / (n - w) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(iters: u64, warmup: u64) -> TrainConfig {
        TrainConfig {
            iterations: iters,
            warmup_steps: warmup,
            peak_lr: 1e-3,
            ..TrainConfig::pretrain()
        }
    }

    #[test]
    fn analytic_points() {
        let c = cfg(1000, 100);
        assert_eq!(lr_at(100, &c), 1e-3);
        assert!((lr_at(550, &c) - 5e-4).abs() < 1e-15);
        assert!(lr_at(1000, &c).abs() < 1e-12);
        assert_eq!(lr_at(0, &c), 0.0);
        assert!((lr_at(50, &c) - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn shape_is_continuous_with_a_single_peak() {
        let c = cfg(300, 40);
        let lrs: Vec<f64> = (0..=300).map(|s| lr_at(s, &c)).collect();
        let argmax = (0..lrs.len())
            .max_by(|&a, &b| lrs[a].total_cmp(&lrs[b]))
            .unwrap();
        assert_eq!(argmax, 40);
        for w in lrs.windows(2) {
            assert!((w[1] - w[0]).abs() <= 1e-3 / 40.0 + 1e-15);
            assert!(w[0] >= 0.0);
        }
        assert!(lrs[..=40].windows(2).all(|w| w[1] > w[0]));
        assert!(lrs[40..].windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn no_warmup() {
        let c = cfg(10, 0);
        assert_eq!(lr_at(0, &c), 1e-3);
    }

    #[test]
    fn stage_sets() {
        let b = Stage::Base.trainable(false);
        assert!(b.contains(ParamGroup::Lm) && !b.contains(ParamGroup::Lora));
        let p = Stage::Pretrain.trainable(false);
        assert!(p.contains(ParamGroup::Abstractor) && !p.contains(ParamGroup::Lora));
        let f = Stage::Finetune.trainable(false);
        assert!(f.contains(ParamGroup::Lora) && f.contains(ParamGroup::ContextQFormer));
        assert!(!f.contains(ParamGroup::Abstractor) && !f.contains(ParamGroup::Lm));
        assert!(Stage::Finetune
            .trainable(true)
            .contains(ParamGroup::Projection));
    }

    #[test]
    fn validation() {
        assert!(cfg(10, 20).validate().is_err());
        let mut c = cfg(10, 2);
        c.peak_lr = 0.0;
        assert!(c.validate().is_err());
        assert!(TrainConfig::finetune().validate().is_ok());
    }
}
