use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use xvqa_nn::rng::{derive_seed, stream};

use super::finetune::{run_phase, Phase};
use super::{FinetuneConfig, StageSchedule, TrainedModel};
use crate::model::Example;
use crate::synthdata::Dataset;
use crate::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FewshotConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for FewshotConfig {
    fn default() -> Self {
        FewshotConfig { epochs: 10, lr: 1e-4, batch_size: 32, weight_decay: 0.05, clip_norm: 1.0 }
    }
}

/// The first `k` scenes of a seeded permutation of `lang`'s few-shot pool,
/// so smaller shot counts are always subsets of larger ones.
pub fn fewshot_scenes(ds: &Dataset, lang: &str, k: usize, seed: u64) -> Result<Vec<u64>> {
    let pool = ds
        .splits
        .fewshot_pools
        .get(lang)
        .ok_or_else(|| CoreError::Config(format!("no few-shot pool for language '{lang}'")))?;
    if k > pool.len() {
        return Err(CoreError::Config(format!("{k} shots requested, '{lang}' pool has {} scenes", pool.len())));
    }
    let mut order = pool.clone();
    order.shuffle(&mut stream(seed, &format!("fewshot/{lang}"), 0));
    order.truncate(k);
    Ok(order)
}

/// Further trains a fine-tuned model on every question of `k` target-language
/// scenes, keeping the model's final freeze mask. `k = 0` returns the model
/// unchanged.
pub fn fewshot_adapt(
    trained: &TrainedModel,
    ds: &Dataset,
    lang: &str,
    k: usize,
    cfg: &FewshotConfig,
    seed: u64,
) -> Result<TrainedModel> {
    let scenes: BTreeSet<u64> = fewshot_scenes(ds, lang, k, seed)?.into_iter().collect();
    if k == 0 {
        return Ok(trained.clone());
    }
    let examples = ds
        .splits
        .fewshot
        .iter()
        .filter(|q| scenes.contains(&q.scene_id))
        .map(|q| Example::from_question(q, lang, ds.visual(q.scene_id)?))
        .collect::<Result<Vec<_>>>()?;
    if examples.is_empty() {
        return Err(CoreError::Training(format!("{k} '{lang}' scenes yield no few-shot questions")));
    }
    let settings = FinetuneConfig {
        strategy: trained.strategy,
        schedule: StageSchedule {
            total_epochs: cfg.epochs,
            stage1_epochs: cfg.epochs,
            stage2_epochs: 0,
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
        },
        head: trained.model.head,
        with_qtype: trained.with_qtype,
        freeze_positional: false,
    };
    let mut out = trained.clone();
    let phase = Phase { index: 3, epochs: cfg.epochs, mask: &trained.mask };
    let run_seed = derive_seed(seed, &format!("fewshot/{lang}/run"), k as u64);
    run_phase(&mut out.model, phase, &examples, &[], &settings, run_seed, &mut Vec::new())?;
    Ok(out)
}
