//! Pretraining, the fine-tuning strategies with their freeze masks and stage
//! schedules, and few-shot adaptation.

mod fewshot;
mod finetune;
mod pretrain;

pub use fewshot::{fewshot_adapt, fewshot_scenes, FewshotConfig};
pub use finetune::{
    examples_for, finetune, finetune_from_stage1, finetune_stage1, model_from_snapshot, predict_examples,
    reset_for_stage2, write_log, FinetuneConfig, FinetuneOutcome, LogRecord, StageOne, TrainedModel,
};
pub use pretrain::{
    evaluate_pretraining, pretrain, PretrainConfig, PretrainLogRecord, PretrainMetrics, PretrainedSnapshot,
};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use xvqa_nn::ParamSet;

use crate::model::ParamGroup;
use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "standard")]
    Standard,
    #[serde(rename = "ft")]
    Ft,
    #[serde(rename = "ft_short")]
    FtShort,
    #[serde(rename = "ft_long")]
    FtLong,
    #[serde(rename = "sb")]
    Sb,
    /// Frozen text embeddings for stage 1, then optimizer and learning-rate
    /// restart for stage 2 without any parameter reset.
    #[serde(rename = "ft_star")]
    FtStar,
}

impl Strategy {
    pub const ALL: [Strategy; 6] =
        [Strategy::Standard, Strategy::Ft, Strategy::FtShort, Strategy::FtLong, Strategy::Sb, Strategy::FtStar];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Standard => "standard",
            Strategy::Ft => "ft",
            Strategy::FtShort => "ft_short",
            Strategy::FtLong => "ft_long",
            Strategy::Sb => "sb",
            Strategy::FtStar => "ft_star",
        }
    }

    pub fn parse(s: &str) -> Result<Strategy> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown strategy '{s}'")))
    }

    /// Number of training stages.
    pub fn stages(self) -> usize {
        match self {
            Strategy::Sb | Strategy::FtStar => 2,
            _ => 1,
        }
    }

    /// Epochs of each stage under `schedule`.
    pub fn stage_epochs(self, schedule: &StageSchedule) -> Vec<usize> {
        match self {
            Strategy::Standard | Strategy::Ft | Strategy::FtLong => vec![schedule.total_epochs],
            Strategy::FtShort => vec![schedule.stage1_epochs],
            Strategy::Sb | Strategy::FtStar => vec![schedule.stage1_epochs, schedule.stage2_epochs],
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const M3P_REFERENCE_LR: f64 = 2e-5;
pub const UC2_REFERENCE_LR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSchedule {
    pub total_epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for StageSchedule {
    fn default() -> Self {
        StageSchedule {
            total_epochs: 6,
            stage1_epochs: 4,
            stage2_epochs: 2,
            lr: 1e-3,
            batch_size: 32,
            weight_decay: 0.05,
            clip_norm: 1.0,
        }
    }
}

impl StageSchedule {
    /// "m3p-like" (4 + 2), "uc2-like" (3 + 3), and their "-reference"
    /// variants with the original, much smaller learning rates.
    pub fn preset(name: &str) -> Result<StageSchedule> {
        let base = StageSchedule::default();
        Ok(match name {
            "m3p-like" => base,
            "uc2-like" => StageSchedule { stage1_epochs: 3, stage2_epochs: 3, ..base },
            "m3p-reference" => StageSchedule { lr: M3P_REFERENCE_LR, ..base },
            "uc2-reference" => StageSchedule { stage1_epochs: 3, stage2_epochs: 3, lr: UC2_REFERENCE_LR, ..base },
            other => return Err(CoreError::Config(format!("unknown stage preset '{other}'"))),
        })
    }

    /// Checks stage budgets against `strategy`: the two-stage strategies
    /// and the budget-matched FT variants need stage1 + stage2 = total.
    pub fn validate(&self, strategy: Strategy) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || self.weight_decay < 0.0 || !(self.clip_norm > 0.0) {
            return Err(CoreError::Config(format!("invalid schedule {self:?}")));
        }
        let matched = matches!(strategy, Strategy::FtShort | Strategy::FtLong | Strategy::Sb);
        if matched && self.stage1_epochs + self.stage2_epochs != self.total_epochs {
            return Err(CoreError::Config(format!(
                "budget mismatch for {strategy}: stage1 {} + stage2 {} != total {}",
                self.stage1_epochs, self.stage2_epochs, self.total_epochs
            )));
        }
        if strategy.stage_epochs(self).contains(&0) {
            return Err(CoreError::Config(format!("{strategy}: every stage needs at least one epoch")));
        }
        Ok(())
    }
}

/// Parameter groups excluded from optimizer updates.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FreezeMask {
    pub groups: BTreeSet<ParamGroup>,
}

impl FreezeMask {
    pub fn of(groups: impl IntoIterator<Item = ParamGroup>) -> FreezeMask {
        FreezeMask { groups: groups.into_iter().collect() }
    }

    pub fn contains(&self, g: ParamGroup) -> bool {
        self.groups.contains(&g)
    }

    /// Also freezes position and segment tables whenever text embeddings are
    /// frozen.
    pub fn with_positional(mut self) -> FreezeMask {
        if self.contains(ParamGroup::TextEmbeddings) {
            self.groups.extend([ParamGroup::PositionEmbeddings, ParamGroup::SegmentEmbeddings]);
        }
        self
    }

    /// Per-tensor trainable flags for `params`. Tensors outside the model
    /// groups (auxiliary heads) are always trainable.
    pub fn trainable(&self, params: &ParamSet) -> Vec<bool> {
        params.iter().map(|p| ParamGroup::parse(&p.group).is_none_or(|g| !self.contains(g))).collect()
    }
}

/// Freeze mask for `stage` (1-based) of `strategy`.
pub fn freeze_mask(strategy: Strategy, stage: usize) -> Result<FreezeMask> {
    if stage == 0 || stage > strategy.stages() {
        return Err(CoreError::Config(format!("{strategy} has no stage {stage}")));
    }
    Ok(match (strategy, stage) {
        (Strategy::Standard, _) => FreezeMask::default(),
        (Strategy::Sb, 2) => FreezeMask::of([ParamGroup::TextEmbeddings, ParamGroup::HeadWeight]),
        _ => FreezeMask::of([ParamGroup::TextEmbeddings]),
    })
}

/// Linear decay from `base` to zero over `total` steps.
pub(crate) fn linear_decay(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - step as f64 / total as f64)
}
