use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use xvqa_nn::rng::{derive_seed, stream};
use xvqa_nn::{clip_global_norm, AdamW, AdamWConfig, Graph, ParamSet, Tensor};

use super::{freeze_mask, linear_decay, FreezeMask, PretrainedSnapshot, StageSchedule, Strategy};
use crate::model::{
    classify, encode_batch, init_head_trans, predict, Example, HeadKind, InputAblation, Model, ModelConfig, ParamGroup,
};
use crate::synthdata::{Dataset, Split};
use crate::{io_err, CoreError, Result};

const ENCODER_GROUPS: [ParamGroup; 5] = [
    ParamGroup::TextEmbeddings,
    ParamGroup::PositionEmbeddings,
    ParamGroup::SegmentEmbeddings,
    ParamGroup::Backbone,
    ParamGroup::VisualProjections,
];

/// Groups that stage 2 of self-bootstrapping restores from the snapshot.
const RESET_GROUPS: [ParamGroup; 4] = [
    ParamGroup::Backbone,
    ParamGroup::VisualProjections,
    ParamGroup::PositionEmbeddings,
    ParamGroup::SegmentEmbeddings,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub strategy: Strategy,
    pub schedule: StageSchedule,
    pub head: HeadKind,
    pub with_qtype: bool,
    /// Freeze position and segment tables together with text embeddings.
    pub freeze_positional: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            strategy: Strategy::Standard,
            schedule: StageSchedule::default(),
            head: HeadKind::Deep,
            with_qtype: false,
            freeze_positional: false,
        }
    }
}

impl FinetuneConfig {
    pub fn mask(&self, stage: usize) -> Result<FreezeMask> {
        let m = freeze_mask(self.strategy, stage)?;
        Ok(if self.freeze_positional { m.with_positional() } else { m })
    }
}

/// One line of the training log, written at the end of every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: usize,
    pub epoch: usize,
    pub steps: u64,
    /// Mean training loss over the epoch.
    pub loss: f64,
    pub dev_accuracy: f64,
    /// Mean pre-clipping global gradient norm over the epoch.
    pub grad_norm: f64,
}

/// A fine-tuned model together with how it must be fed and further trained.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: Model,
    pub strategy: Strategy,
    pub with_qtype: bool,
    /// Mask of the final stage; few-shot adaptation inherits it.
    pub mask: FreezeMask,
}

#[derive(Serialize, Deserialize)]
struct TrainedMeta {
    strategy: Strategy,
    with_qtype: bool,
    mask: FreezeMask,
}

impl TrainedModel {
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        self.model.save(dir, stem)?;
        let meta = TrainedMeta { strategy: self.strategy, with_qtype: self.with_qtype, mask: self.mask.clone() };
        let text = serde_json::to_string_pretty(&meta).map_err(|e| CoreError::Serde(e.to_string()))?;
        fs::write(dir.join(format!("{stem}.training.json")), text).map_err(io_err(stem))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<TrainedModel> {
        let model = Model::load(dir, stem)?;
        let path = dir.join(format!("{stem}.training.json"));
        let text = fs::read_to_string(&path).map_err(|_| CoreError::MissingArtifact(path.display().to_string()))?;
        let meta: TrainedMeta = serde_json::from_str(&text).map_err(|e| CoreError::Serde(e.to_string()))?;
        Ok(TrainedModel { model, strategy: meta.strategy, with_qtype: meta.with_qtype, mask: meta.mask })
    }

    pub fn predict(&self, examples: &[Example], ablation: InputAblation) -> Result<Vec<usize>> {
        predict_examples(&self.model, examples, self.with_qtype, ablation)
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub trained: TrainedModel,
    pub log: Vec<LogRecord>,
    /// Optimizer steps taken in each phase.
    pub phase_steps: Vec<u64>,
    pub stage1_end: ParamSet,
    /// Parameters right after the stage-2 reset (self-bootstrapping only).
    pub stage2_start: Option<ParamSet>,
}

/// All questions of `split` rendered in `lang`, paired with their scenes.
pub fn examples_for(ds: &Dataset, split: Split, lang: &str) -> Result<Vec<Example>> {
    ds.questions(split).iter().map(|q| Example::from_question(q, lang, ds.visual(q.scene_id)?)).collect()
}

const EVAL_BATCH: usize = 64;

/// Eval-mode predictions in input order.
pub fn predict_examples(
    model: &Model,
    examples: &[Example],
    with_qtype: bool,
    ablation: InputAblation,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let inp = encode_batch(&refs, &model.config, with_qtype, ablation)?;
        out.extend(predict(&model.params, &model.config, model.head, &inp)?);
    }
    Ok(out)
}

fn accuracy(model: &Model, examples: &[Example], with_qtype: bool) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let preds = predict_examples(model, examples, with_qtype, InputAblation::None)?;
    let hits = preds.iter().zip(examples).filter(|(p, e)| **p == e.answer).count();
    Ok(hits as f64 / examples.len() as f64)
}

/// Full model whose encoder groups come from the snapshot and whose head is
/// freshly initialized from `seed`.
pub fn model_from_snapshot(snapshot: &PretrainedSnapshot, head: HeadKind, seed: u64) -> Result<Model> {
    let mut model = Model::new(snapshot.config.clone(), head, seed)?;
    for g in ENCODER_GROUPS {
        model.params.copy_group_from(g.name(), &snapshot.params)?;
    }
    Ok(model)
}

/// Restores backbone, visual projections, position and segment tables from
/// the snapshot, keeps text embeddings and the output layer, and draws a
/// fresh head transformation from `(seed, "stage2")`.
pub fn reset_for_stage2(
    current: &ParamSet,
    snapshot: &PretrainedSnapshot,
    cfg: &ModelConfig,
    head: HeadKind,
    seed: u64,
) -> Result<ParamSet> {
    let mut out = current.clone();
    for g in RESET_GROUPS {
        out.copy_group_from(g.name(), &snapshot.params)
            .map_err(|e| CoreError::Training(format!("stage-2 reset, group {g}: {e}")))?;
    }
    let fresh = init_head_trans(cfg, head, derive_seed(seed, "stage2", 0))?;
    let expected = current.group_indices(ParamGroup::HeadTrans.name()).len();
    if fresh.len() != expected {
        return Err(CoreError::Training(format!("head_trans has {expected} tensors, fresh init {}", fresh.len())));
    }
    for p in fresh.iter() {
        let i = out
            .index_of(&p.name)
            .filter(|&i| out.tensor(i).shape() == p.tensor.shape())
            .ok_or_else(|| CoreError::Training(format!("{} does not align for the stage-2 reset", p.name)))?;
        *out.tensor_mut(i) = p.tensor.clone();
    }
    Ok(out)
}

pub(super) struct Phase<'a> {
    pub index: usize,
    pub epochs: usize,
    pub mask: &'a FreezeMask,
}

/// One phase of training with a fresh optimizer and a learning rate that
/// decays linearly to zero over the phase. Returns the step count.
pub(super) fn run_phase(
    model: &mut Model,
    phase: Phase<'_>,
    train: &[Example],
    dev: &[Example],
    cfg: &FinetuneConfig,
    seed: u64,
    log: &mut Vec<LogRecord>,
) -> Result<u64> {
    let sched = &cfg.schedule;
    let trainable = phase.mask.trainable(&model.params);
    let mut opt =
        AdamW::new(AdamWConfig { lr: sched.lr, weight_decay: sched.weight_decay, ..Default::default() }, &model.params);
    let total = (train.len().div_ceil(sched.batch_size) * phase.epochs) as u64;
    let mut dropout = stream(seed, "dropout", phase.index as u64);
    let mut step = 0u64;
    for epoch in 0..phase.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(seed, "shuffle", (phase.index * 1000 + epoch) as u64));
        let (mut loss_sum, mut norm_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(sched.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let targets: Vec<usize> = batch.iter().map(|e| e.answer).collect();
            let inp = encode_batch(&batch, &model.config, cfg.with_qtype, InputAblation::None)?;
            let mut g = Graph::new(&model.params);
            let logits = classify(&mut g, &model.config, model.head, &inp, Some(&mut dropout))?;
            let loss = g.softmax_cross_entropy(logits, &targets)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(CoreError::Training(format!("loss diverged in phase {} at step {step}", phase.index)));
            }
            let mut grads = g.backward(loss)?;
            drop(g);
            for (gr, &t) in grads.iter_mut().zip(&trainable) {
                if !t {
                    *gr = Tensor::zeros(gr.shape());
                }
            }
            norm_sum += clip_global_norm(&mut grads, sched.clip_norm);
            opt.step(&mut model.params, &grads, &trainable, linear_decay(sched.lr, step, total))?;
            loss_sum += value;
            batches += 1;
            step += 1;
        }
        log.push(LogRecord {
            phase: phase.index,
            epoch,
            steps: step,
            loss: loss_sum / batches.max(1) as f64,
            dev_accuracy: accuracy(model, dev, cfg.with_qtype)?,
            grad_norm: norm_sum / batches.max(1) as f64,
        });
    }
    Ok(step)
}

/// Model, log and step count at the end of the first phase.
#[derive(Debug, Clone)]
pub struct StageOne {
    pub model: Model,
    pub log: Vec<LogRecord>,
    pub steps: u64,
}

/// Runs the first phase only. Strategies whose first phases agree in mask
/// and epochs produce bit-identical results here, so the result can be
/// shared between them.
pub fn finetune_stage1(
    snapshot: &PretrainedSnapshot,
    train: &[Example],
    dev: &[Example],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<StageOne> {
    cfg.schedule.validate(cfg.strategy)?;
    if train.is_empty() {
        return Err(CoreError::Training("no training examples".into()));
    }
    let mut model = model_from_snapshot(snapshot, cfg.head, seed)?;
    let mask = cfg.mask(1)?;
    let epochs = cfg.strategy.stage_epochs(&cfg.schedule)[0];
    let mut log = Vec::new();
    let steps = run_phase(&mut model, Phase { index: 1, epochs, mask: &mask }, train, dev, cfg, seed, &mut log)?;
    Ok(StageOne { model, log, steps })
}

/// Continues from a first-phase result: the stage-2 reset and second phase
/// for two-stage strategies, nothing otherwise.
pub fn finetune_from_stage1(
    snapshot: &PretrainedSnapshot,
    stage1: StageOne,
    train: &[Example],
    dev: &[Example],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    cfg.schedule.validate(cfg.strategy)?;
    let StageOne { mut model, mut log, steps } = stage1;
    if model.head != cfg.head {
        return Err(CoreError::Training(format!(
            "stage-1 head {} differs from {}",
            model.head.name(),
            cfg.head.name()
        )));
    }
    let stage1_end = model.params.clone();
    let mut phase_steps = vec![steps];
    let mut stage2_start = None;
    let mut final_mask = cfg.mask(1)?;
    if cfg.strategy.stages() == 2 {
        let mask2 = cfg.mask(2)?;
        if cfg.strategy == Strategy::Sb {
            model.params = reset_for_stage2(&model.params, snapshot, &model.config, model.head, seed)?;
            stage2_start = Some(model.params.clone());
        }
        let epochs = cfg.strategy.stage_epochs(&cfg.schedule)[1];
        let phase2 = Phase { index: 2, epochs, mask: &mask2 };
        phase_steps.push(run_phase(&mut model, phase2, train, dev, cfg, seed, &mut log)?);
        final_mask = mask2;
    }
    Ok(FinetuneOutcome {
        trained: TrainedModel { model, strategy: cfg.strategy, with_qtype: cfg.with_qtype, mask: final_mask },
        log,
        phase_steps,
        stage1_end,
        stage2_start,
    })
}

/// Fine-tunes a snapshot on source-language training examples with the
/// configured strategy. Every stage restarts the optimizer and the
/// learning-rate schedule.
pub fn finetune(
    snapshot: &PretrainedSnapshot,
    train: &[Example],
    dev: &[Example],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    let stage1 = finetune_stage1(snapshot, train, dev, cfg, seed)?;
    finetune_from_stage1(snapshot, stage1, train, dev, cfg, seed)
}

/// Writes log records as JSON lines.
pub fn write_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut text = String::new();
    for r in log {
        text.push_str(&serde_json::to_string(r).map_err(|e| CoreError::Serde(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path.display()))
}
