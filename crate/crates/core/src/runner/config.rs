use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::{GaussianStats, Protocol};
use crate::model::{HeadKind, ModelConfig};
use crate::synthdata::answers::NUM_CLASSES;
use crate::synthdata::DataConfig;
use crate::training::{FewshotConfig, FinetuneConfig, PretrainConfig, StageSchedule, Strategy};
use crate::{io_err, CoreError, Result};

/// Model size preset plus optional per-field overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: String,
    pub d_model: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub head_hidden: Option<usize>,
    pub head_dropout: Option<f64>,
    pub max_text_len: Option<usize>,
    pub embedding_std: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "small".into(),
            d_model: None,
            layers: None,
            heads: None,
            ffn_dim: None,
            head_hidden: None,
            head_dropout: None,
            max_text_len: None,
            embedding_std: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, vocab_size: usize, d_v: usize) -> Result<ModelConfig> {
        let mut c = ModelConfig::preset(&self.preset, vocab_size, d_v, NUM_CLASSES)?;
        c.d_model = self.d_model.unwrap_or(c.d_model);
        c.ffn_dim = self.ffn_dim.unwrap_or(4 * c.d_model);
        c.layers = self.layers.unwrap_or(c.layers);
        c.heads = self.heads.unwrap_or(c.heads);
        c.head_hidden = self.head_hidden.unwrap_or(c.head_hidden);
        c.head_dropout = self.head_dropout.unwrap_or(c.head_dropout);
        c.max_text_len = self.max_text_len.unwrap_or(c.max_text_len);
        c.embedding_std = self.embedding_std.unwrap_or(c.embedding_std);
        c.validate()?;
        Ok(c)
    }
}

/// One fine-tuning configuration: a strategy, a head and the qtype flag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    /// Report label; derived from the other fields when absent.
    #[serde(default)]
    pub name: Option<String>,
    pub strategy: Strategy,
    #[serde(default = "default_head")]
    pub head: HeadKind,
    #[serde(default)]
    pub with_qtype: bool,
}

fn default_head() -> HeadKind {
    HeadKind::Deep
}

impl ArmConfig {
    pub fn new(strategy: Strategy, head: HeadKind, with_qtype: bool) -> ArmConfig {
        ArmConfig { name: None, strategy, head, with_qtype }
    }

    /// `strategy-head`, with `-q` appended for qtype conditioning.
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            format!("{}-{}{}", self.strategy, self.head.name(), if self.with_qtype { "-q" } else { "" })
        })
    }
}

/// Stage schedule shared by every arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub stage_preset: String,
    pub total_epochs: Option<usize>,
    pub stage1_epochs: Option<usize>,
    pub stage2_epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub weight_decay: Option<f64>,
    pub clip_norm: Option<f64>,
    pub freeze_positional: bool,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            stage_preset: "m3p-like".into(),
            total_epochs: None,
            stage1_epochs: None,
            stage2_epochs: None,
            lr: None,
            batch_size: None,
            weight_decay: None,
            clip_norm: None,
            freeze_positional: false,
        }
    }
}

impl FinetuneSection {
    pub fn schedule(&self) -> Result<StageSchedule> {
        let b = StageSchedule::preset(&self.stage_preset)?;
        Ok(StageSchedule {
            total_epochs: self.total_epochs.unwrap_or(b.total_epochs),
            stage1_epochs: self.stage1_epochs.unwrap_or(b.stage1_epochs),
            stage2_epochs: self.stage2_epochs.unwrap_or(b.stage2_epochs),
            lr: self.lr.unwrap_or(b.lr),
            batch_size: self.batch_size.unwrap_or(b.batch_size),
            weight_decay: self.weight_decay.unwrap_or(b.weight_decay),
            clip_norm: self.clip_norm.unwrap_or(b.clip_norm),
        })
    }

    pub fn for_arm(&self, arm: &ArmConfig) -> Result<FinetuneConfig> {
        let cfg = FinetuneConfig {
            strategy: arm.strategy,
            schedule: self.schedule()?,
            head: arm.head,
            with_qtype: arm.with_qtype,
            freeze_positional: self.freeze_positional,
        };
        cfg.schedule.validate(arm.strategy)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    /// Protocols to run; MM is always evaluated.
    pub protocols: Vec<Protocol>,
    /// Evaluation languages; every dataset language when absent.
    pub languages: Option<Vec<String>>,
    pub gaussian_stats: GaussianStats,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            protocols: vec![Protocol::Mm, Protocol::MmV, Protocol::MmT],
            languages: None,
            gaussian_stats: GaussianStats::PerDimension,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FewshotSection {
    /// Shot counts (scenes per target language); empty disables the stage.
    pub shots: Vec<usize>,
    /// Target languages; every non-source language when absent.
    pub languages: Option<Vec<String>>,
    pub train: FewshotConfig,
}

/// Arms compared by the trend checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrendSpec {
    pub sb: String,
    pub standard: String,
    pub deep: String,
    pub linear: String,
    pub with_qtype: String,
    pub without_qtype: String,
}

impl Default for TrendSpec {
    fn default() -> Self {
        TrendSpec {
            sb: "sb-deep".into(),
            standard: "standard-deep".into(),
            deep: "standard-deep".into(),
            linear: "standard-linear".into(),
            with_qtype: "standard-deep-q".into(),
            without_qtype: "standard-deep".into(),
        }
    }
}

/// Comparison tables to emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Table1,
    Table2,
    Table3,
    Fig2,
}

impl Layout {
    pub fn name(self) -> &'static str {
        match self {
            Layout::Table1 => "table1",
            Layout::Table2 => "table2",
            Layout::Table3 => "table3",
            Layout::Fig2 => "fig2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    pub layouts: Vec<Layout>,
    /// Arm providing the unimodal and MM(Q) columns of table2.
    pub table2_base: String,
    /// Arm providing the MM(Q+SB), MM-V and MM-T columns of table2.
    pub table2_sb: String,
    /// Run the trend checks (needs at least five seeds).
    pub trend: bool,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection {
            layouts: vec![Layout::Table1, Layout::Fig2],
            table2_base: "standard-deep-q".into(),
            table2_sb: "sb-deep-q".into(),
            trend: false,
        }
    }
}

/// Everything one experiment needs, read from TOML. Unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Fine-tuning seeds; each arm is trained once per seed.
    pub seeds: Vec<u64>,
    pub pretrain_seed: u64,
    pub output_dir: String,
    pub data: DataConfig,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneSection,
    pub arms: Vec<ArmConfig>,
    pub evaluate: EvaluateSection,
    pub fewshot: FewshotSection,
    pub report: ReportSection,
    pub trend: TrendSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0, 1, 2, 3],
            pretrain_seed: 0,
            output_dir: "runs/default".into(),
            data: DataConfig::default(),
            model: ModelSection::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneSection::default(),
            arms: vec![ArmConfig::new(Strategy::Sb, HeadKind::Deep, false)],
            evaluate: EvaluateSection::default(),
            fewshot: FewshotSection::default(),
            report: ReportSection::default(),
            trend: TrendSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CoreError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(io_err(path.display()))?;
        Self::from_toml(&text).map_err(|e| match e {
            CoreError::Config(m) => CoreError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CoreError::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CoreError::Config("at least one seed is required".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(CoreError::Config("duplicate seeds".into()));
        }
        if self.arms.is_empty() {
            return Err(CoreError::Config("at least one arm is required".into()));
        }
        let mut labels: Vec<String> = self.arms.iter().map(ArmConfig::label).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(CoreError::Config("two arms share a label".into()));
        }
        self.data.validate()?;
        self.pretrain.validate()?;
        for arm in &self.arms {
            self.finetune.for_arm(arm)?;
        }
        Ok(())
    }

    /// sha256 of the canonical JSON form, output directory excluded so the
    /// same experiment hashes alike wherever it is written.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig { output_dir: String::new(), ..self.clone() };
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
