//! Unimodal train/eval protocols, the Gaussian feature sampler, and the
//! evaluation engine with per-language, per-question-type accuracy.

mod ablation;
mod report;

pub use ablation::{apply_ablation, gaussian_features, moments, AblationMode, GaussianStats};
pub use report::{
    majority_rate, score, transfer_gap, AccuracyTable, AnswerHistogram, CellRow, Counts, EvalReport, GapRow,
    ReportCells,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use xvqa_nn::rng::derive_seed;

use crate::model::{Example, InputAblation};
use crate::synthdata::{Dataset, Split, SOURCE};
use crate::training::{examples_for, finetune, FinetuneConfig, PretrainedSnapshot, TrainedModel};
use crate::{CoreError, Result};

/// A training-input mode paired with an evaluation-input mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "MM")]
    Mm,
    #[serde(rename = "MM-V")]
    MmV,
    #[serde(rename = "MM-T")]
    MmT,
    #[serde(rename = "V-V")]
    VV,
    #[serde(rename = "T-T")]
    TT,
    #[serde(rename = "TG-TG")]
    TgTg,
}

impl Protocol {
    pub const ALL: [Protocol; 6] =
        [Protocol::Mm, Protocol::MmV, Protocol::MmT, Protocol::VV, Protocol::TT, Protocol::TgTg];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Mm => "MM",
            Protocol::MmV => "MM-V",
            Protocol::MmT => "MM-T",
            Protocol::VV => "V-V",
            Protocol::TT => "T-T",
            Protocol::TgTg => "TG-TG",
        }
    }

    pub fn parse(s: &str) -> Result<Protocol> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| CoreError::Config(format!("unknown protocol '{s}'")))
    }

    pub fn train_mode(self) -> AblationMode {
        match self {
            Protocol::Mm | Protocol::MmV | Protocol::MmT => AblationMode::Identity,
            Protocol::VV => AblationMode::QuestionMarkOnly,
            Protocol::TT => AblationMode::ZeroVisual,
            Protocol::TgTg => AblationMode::GaussianVisual,
        }
    }

    pub fn eval_mode(self) -> AblationMode {
        match self {
            Protocol::Mm => AblationMode::Identity,
            Protocol::MmV | Protocol::VV => AblationMode::QuestionMarkOnly,
            Protocol::MmT | Protocol::TT => AblationMode::ZeroVisual,
            Protocol::TgTg => AblationMode::GaussianVisual,
        }
    }

    /// Whether the protocol evaluates a standard multimodal model rather than
    /// training its own.
    pub fn uses_multimodal_model(self) -> bool {
        self.train_mode() == AblationMode::Identity
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Eval-mode accuracy of `model` on `split` in each of `languages`, with the
/// inputs rewritten by `mode`. The model's own qtype setting is used.
pub fn evaluate(
    model: &TrainedModel,
    ds: &Dataset,
    split: Split,
    languages: &[String],
    mode: AblationMode,
    seed: u64,
    stats: GaussianStats,
) -> Result<AccuracyTable> {
    let known = ds.vocab.language_names();
    let mut table = AccuracyTable::default();
    for lang in languages {
        if !known.contains(lang) {
            return Err(CoreError::Evaluation(format!("language '{lang}' is not in the dataset")));
        }
        let examples = apply_ablation(&examples_for(ds, split, lang)?, mode, seed, stats)?;
        let preds = model.predict(&examples, InputAblation::None)?;
        let part = score(&examples, &preds)?;
        table.cells.extend(part.cells);
        table.answers.extend(part.answers);
    }
    Ok(table)
}

/// Everything a protocol run needs besides the protocol and seeds.
#[derive(Debug, Clone, Copy)]
pub struct ProtocolSetup<'a> {
    pub dataset: &'a Dataset,
    pub snapshot: &'a PretrainedSnapshot,
    pub finetune: &'a FinetuneConfig,
    /// Report label of the training arm.
    pub arm: &'a str,
    pub languages: &'a [String],
    pub stats: GaussianStats,
}

/// Seed of the Gaussian draws for training (`0`) or evaluation (`1`).
pub fn sampler_seed(seed: u64, phase: u64) -> u64 {
    derive_seed(seed, "gaussian_sampler", phase)
}

/// Source-language train and dev examples rewritten by `mode`.
pub fn training_examples(
    ds: &Dataset,
    mode: AblationMode,
    seed: u64,
    stats: GaussianStats,
) -> Result<(Vec<Example>, Vec<Example>)> {
    let train = apply_ablation(&examples_for(ds, Split::Train, SOURCE)?, mode, sampler_seed(seed, 0), stats)?;
    let dev = apply_ablation(&examples_for(ds, Split::Dev, SOURCE)?, mode, sampler_seed(seed, 1), stats)?;
    Ok((train, dev))
}

/// Trains a model on source-language train questions rewritten by `mode`.
pub fn train_with_mode(setup: &ProtocolSetup, mode: AblationMode, seed: u64) -> Result<TrainedModel> {
    let (train, dev) = training_examples(setup.dataset, mode, seed, setup.stats)?;
    Ok(finetune(setup.snapshot, &train, &dev, setup.finetune, seed)?.trained)
}

/// Runs `protocol` for every seed and evaluates on the zero-shot test split.
///
/// Multimodal-trained protocols reuse the models in `mm_models`, training and
/// caching any seed that is missing; the other protocols always train a fresh
/// model on ablated inputs.
pub fn run_protocol(
    protocol: Protocol,
    setup: &ProtocolSetup,
    seeds: &[u64],
    mm_models: &mut BTreeMap<u64, TrainedModel>,
) -> Result<EvalReport> {
    let mut report = EvalReport::new(SOURCE);
    for &seed in seeds {
        let fresh;
        let model = if protocol.uses_multimodal_model() {
            if let std::collections::btree_map::Entry::Vacant(e) = mm_models.entry(seed) {
                let m = train_with_mode(setup, AblationMode::Identity, seed)?;
                e.insert(m);
            }
            &mm_models[&seed]
        } else {
            fresh = train_with_mode(setup, protocol.train_mode(), seed)?;
            &fresh
        };
        let table = evaluate(
            model,
            setup.dataset,
            Split::Test,
            setup.languages,
            protocol.eval_mode(),
            sampler_seed(seed, 1),
            setup.stats,
        )?;
        report.insert(protocol.name(), setup.arm, seed, &table)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_modes() {
        for p in Protocol::ALL {
            assert_eq!(Protocol::parse(p.name()).unwrap(), p);
            if p.uses_multimodal_model() {
                assert_eq!(p.train_mode(), AblationMode::Identity);
            } else {
                assert_eq!(p.train_mode(), p.eval_mode());
            }
        }
        assert!(Protocol::parse("V-T").is_err());
    }
}
