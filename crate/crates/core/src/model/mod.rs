//! Single-stream multimodal transformer encoder with grouped parameters and
//! the Linear / Deep / DeepNoLN classification heads.

mod encode;
mod forward;

pub use encode::{encode_batch, Example, InputAblation, ModelInputs, VisualMode};
pub use forward::{classify, encoder, forward, head_logits, predict};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use xvqa_nn::init::{normal, orthogonal_init};
use xvqa_nn::rng::{derive_seed, stream};
use xvqa_nn::{ParamSet, Tensor, TensorArchive};

use crate::synthdata::SPATIAL_DIM;
use crate::{io_err, CoreError, Result};

/// Parameter groups: the units that freezing and resetting act on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    TextEmbeddings,
    PositionEmbeddings,
    SegmentEmbeddings,
    Backbone,
    VisualProjections,
    HeadTrans,
    HeadWeight,
    HeadBias,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::TextEmbeddings,
        ParamGroup::PositionEmbeddings,
        ParamGroup::SegmentEmbeddings,
        ParamGroup::Backbone,
        ParamGroup::VisualProjections,
        ParamGroup::HeadTrans,
        ParamGroup::HeadWeight,
        ParamGroup::HeadBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::TextEmbeddings => "text_embeddings",
            ParamGroup::PositionEmbeddings => "position_embeddings",
            ParamGroup::SegmentEmbeddings => "segment_embeddings",
            ParamGroup::Backbone => "backbone",
            ParamGroup::VisualProjections => "visual_projections",
            ParamGroup::HeadTrans => "head_trans",
            ParamGroup::HeadWeight => "head_weight",
            ParamGroup::HeadBias => "head_bias",
        }
    }

    pub fn parse(s: &str) -> Option<ParamGroup> {
        ParamGroup::ALL.into_iter().find(|g| g.name() == s)
    }

    pub fn is_head(self) -> bool {
        matches!(self, ParamGroup::HeadTrans | ParamGroup::HeadWeight | ParamGroup::HeadBias)
    }
}

impl std::fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    Deep,
    DeepNoLn,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Linear => "linear",
            HeadKind::Deep => "deep",
            HeadKind::DeepNoLn => "deep_no_ln",
        }
    }

    pub fn parse(s: &str) -> Option<HeadKind> {
        [HeadKind::Linear, HeadKind::Deep, HeadKind::DeepNoLn].into_iter().find(|h| h.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// Longest text region between [CLS] and [SEP], qtype prefix included.
    pub max_text_len: usize,
    pub max_objects: usize,
    pub d_v: usize,
    pub head_hidden: usize,
    pub head_dropout: f64,
    pub num_classes: usize,
    /// Standard deviation of embedding-table initialization.
    pub embedding_std: f64,
}

impl ModelConfig {
    /// Named size presets: "small" (2 layers) and "base" (4 layers).
    pub fn preset(name: &str, vocab_size: usize, d_v: usize, num_classes: usize) -> Result<ModelConfig> {
        let layers = match name {
            "small" => 2,
            "base" => 4,
            other => return Err(CoreError::Config(format!("unknown model preset '{other}'"))),
        };
        Ok(ModelConfig {
            d_model: 64,
            layers,
            heads: 4,
            ffn_dim: 256,
            vocab_size,
            max_text_len: 24,
            max_objects: 8,
            d_v,
            head_hidden: 64,
            head_dropout: 0.5,
            num_classes,
            embedding_std: 0.02,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.d_model,
            self.layers,
            self.heads,
            self.ffn_dim,
            self.vocab_size,
            self.max_text_len,
            self.max_objects,
            self.d_v,
            self.head_hidden,
            self.num_classes,
        ];
        if dims.contains(&0) {
            return Err(CoreError::Config(format!("all model dimensions must be >= 1: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(CoreError::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if !(0.0..1.0).contains(&self.head_dropout) || !(self.embedding_std > 0.0) {
            return Err(CoreError::Config("head_dropout must lie in [0, 1) and embedding_std be positive".into()));
        }
        Ok(())
    }

    /// Rows of the position table: [CLS], the text region, [SEP].
    pub fn positions(&self) -> usize {
        self.max_text_len + 2
    }
}

fn add(ps: &mut ParamSet, group: ParamGroup, name: &str, t: Tensor) -> Result<()> {
    ps.insert(name, group.name(), t)?;
    Ok(())
}

fn gaussian(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor {
    normal(shape, std, &mut stream(seed, &format!("init/{name}"), 0))
}

fn fan_in(seed: u64, name: &str, rows: usize, cols: usize) -> Tensor {
    gaussian(seed, name, &[rows, cols], 1.0 / (rows as f64).sqrt())
}

/// The head transformation network `f_trans` alone, freshly initialized.
/// Empty for the linear head.
pub fn init_head_trans(cfg: &ModelConfig, head: HeadKind, seed: u64) -> Result<ParamSet> {
    let mut ps = ParamSet::new();
    let g = ParamGroup::HeadTrans;
    if head != HeadKind::Linear {
        let w = orthogonal_init(cfg.d_model, cfg.head_hidden, derive_seed(seed, "init/head.trans.w", 0));
        add(&mut ps, g, "head.trans.w", w)?;
        add(&mut ps, g, "head.trans.b", Tensor::zeros(&[cfg.head_hidden]))?;
        if head == HeadKind::Deep {
            add(&mut ps, g, "head.trans.ln.gain", Tensor::full(&[cfg.head_hidden], 1.0))?;
            add(&mut ps, g, "head.trans.ln.bias", Tensor::zeros(&[cfg.head_hidden]))?;
        }
    }
    Ok(ps)
}

/// All model parameters, deterministic in `seed`.
pub fn build_model(cfg: &ModelConfig, head: HeadKind, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let d = cfg.d_model;
    let es = cfg.embedding_std;
    let mut ps = ParamSet::new();
    add(&mut ps, ParamGroup::TextEmbeddings, "text.token", gaussian(seed, "text.token", &[cfg.vocab_size, d], es))?;
    add(
        &mut ps,
        ParamGroup::PositionEmbeddings,
        "text.position",
        gaussian(seed, "text.position", &[cfg.positions(), d], es),
    )?;
    add(&mut ps, ParamGroup::SegmentEmbeddings, "segment", gaussian(seed, "segment", &[2, d], es))?;
    let vp = ParamGroup::VisualProjections;
    add(&mut ps, vp, "visual.feature.w", fan_in(seed, "visual.feature.w", cfg.d_v, d))?;
    add(&mut ps, vp, "visual.feature.b", Tensor::zeros(&[d]))?;
    add(&mut ps, vp, "visual.spatial.w", fan_in(seed, "visual.spatial.w", SPATIAL_DIM, d))?;
    add(&mut ps, vp, "visual.spatial.b", Tensor::zeros(&[d]))?;
    add(&mut ps, vp, "visual.count", gaussian(seed, "visual.count", &[cfg.max_objects + 1, d], es))?;
    let bb = ParamGroup::Backbone;
    add(&mut ps, bb, "emb_ln.gain", Tensor::full(&[d], 1.0))?;
    add(&mut ps, bb, "emb_ln.bias", Tensor::zeros(&[d]))?;
    for l in 0..cfg.layers {
        for m in ["q", "k", "v", "o"] {
            let name = format!("layer{l}.attn.w{m}");
            add(&mut ps, bb, &name, fan_in(seed, &name, d, d))?;
            add(&mut ps, bb, &format!("layer{l}.attn.b{m}"), Tensor::zeros(&[d]))?;
        }
        add(&mut ps, bb, &format!("layer{l}.ln1.gain"), Tensor::full(&[d], 1.0))?;
        add(&mut ps, bb, &format!("layer{l}.ln1.bias"), Tensor::zeros(&[d]))?;
        let w1 = format!("layer{l}.ffn.w1");
        add(&mut ps, bb, &w1, fan_in(seed, &w1, d, cfg.ffn_dim))?;
        add(&mut ps, bb, &format!("layer{l}.ffn.b1"), Tensor::zeros(&[cfg.ffn_dim]))?;
        let w2 = format!("layer{l}.ffn.w2");
        add(&mut ps, bb, &w2, fan_in(seed, &w2, cfg.ffn_dim, d))?;
        add(&mut ps, bb, &format!("layer{l}.ffn.b2"), Tensor::zeros(&[d]))?;
        add(&mut ps, bb, &format!("layer{l}.ln2.gain"), Tensor::full(&[d], 1.0))?;
        add(&mut ps, bb, &format!("layer{l}.ln2.bias"), Tensor::zeros(&[d]))?;
    }
    for p in init_head_trans(cfg, head, seed)?.iter() {
        ps.insert(p.name.clone(), p.group.clone(), p.tensor.clone())?;
    }
    let out_in = if head == HeadKind::Linear { d } else { cfg.head_hidden };
    add(&mut ps, ParamGroup::HeadWeight, "head.out.w", fan_in(seed, "head.out.w", out_in, cfg.num_classes))?;
    add(&mut ps, ParamGroup::HeadBias, "head.out.b", Tensor::zeros(&[cfg.num_classes]))?;
    Ok(ps)
}

/// Number of scalars in the head groups.
pub fn head_param_count(ps: &ParamSet) -> usize {
    ps.iter().filter(|p| ParamGroup::parse(&p.group).is_some_and(ParamGroup::is_head)).map(|p| p.tensor.numel()).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub head: HeadKind,
    pub params: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: ModelConfig,
    head: HeadKind,
}

impl Model {
    pub fn new(config: ModelConfig, head: HeadKind, seed: u64) -> Result<Model> {
        let params = build_model(&config, head, seed)?;
        Ok(Model { config, head, params })
    }

    /// Writes `<stem>.json` (config) and `<stem>.bin` (parameters).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir.display()))?;
        let meta = ModelMeta { config: self.config.clone(), head: self.head };
        let text = serde_json::to_string_pretty(&meta).map_err(|e| CoreError::Serde(e.to_string()))?;
        fs::write(dir.join(format!("{stem}.json")), text).map_err(io_err(stem))?;
        TensorArchive::from_params(&self.params).save(&dir.join(format!("{stem}.bin")))?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Model> {
        let meta_path = dir.join(format!("{stem}.json"));
        let text =
            fs::read_to_string(&meta_path).map_err(|_| CoreError::MissingArtifact(meta_path.display().to_string()))?;
        let meta: ModelMeta = serde_json::from_str(&text).map_err(|e| CoreError::Serde(e.to_string()))?;
        let params = TensorArchive::load(&dir.join(format!("{stem}.bin")))?.into_params()?;
        let expected = build_model(&meta.config, meta.head, 0)?;
        if !expected.same_layout(&params) {
            return Err(CoreError::Input(format!("{stem}: parameter layout does not match its config")));
        }
        Ok(Model { config: meta.config, head: meta.head, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn cfg() -> ModelConfig {
        ModelConfig::preset("small", 50, 12, 20).unwrap()
    }

    #[test]
    fn head_sizes() {
        let c = cfg();
        let (d, dh, k) = (c.d_model, c.head_hidden, c.num_classes);
        assert_eq!(head_param_count(&build_model(&c, HeadKind::Linear, 1).unwrap()), d * k + k);
        assert_eq!(head_param_count(&build_model(&c, HeadKind::Deep, 1).unwrap()), d * dh + dh + 2 * dh + dh * k + k);
        assert_eq!(head_param_count(&build_model(&c, HeadKind::DeepNoLn, 1).unwrap()), d * dh + dh + dh * k + k);
    }

    #[test]
    fn groups_partition_all_tensors() {
        for head in [HeadKind::Linear, HeadKind::Deep, HeadKind::DeepNoLn] {
            let ps = build_model(&cfg(), head, 3).unwrap();
            let mut covered = BTreeSet::new();
            for g in ParamGroup::ALL {
                for i in ps.group_indices(g.name()) {
                    assert!(covered.insert(i), "tensor {i} in two groups");
                }
            }
            assert_eq!(covered.len(), ps.len());
            assert!(ps.iter().all(|p| ParamGroup::parse(&p.group).is_some()));
        }
    }

    #[test]
    fn deep_first_layer_is_orthogonal() {
        let ps = build_model(&cfg(), HeadKind::Deep, 9).unwrap();
        let w = ps.get("head.trans.w").unwrap();
        let (r, c) = (w.rows(), w.cols());
        assert!(r <= c);
        let mut worst: f64 = 0.0;
        for i in 0..r {
            for j in 0..r {
                let dot: f64 = (0..c).map(|k| w.get2(i, k) * w.get2(j, k)).sum();
                worst = worst.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn deterministic_and_validated() {
        assert_eq!(build_model(&cfg(), HeadKind::Deep, 4).unwrap(), build_model(&cfg(), HeadKind::Deep, 4).unwrap());
        assert_ne!(build_model(&cfg(), HeadKind::Deep, 4).unwrap(), build_model(&cfg(), HeadKind::Deep, 5).unwrap());
        let bad = ModelConfig { heads: 3, ..cfg() };
        assert!(build_model(&bad, HeadKind::Deep, 0).is_err());
        assert!(ModelConfig::preset("huge", 10, 4, 20).is_err());
        assert_eq!(ModelConfig::preset("base", 10, 4, 20).unwrap().layers, 4);
    }

    #[test]
    fn save_load_round_trip() {
        let m = Model::new(cfg(), HeadKind::DeepNoLn, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path(), "m").unwrap();
        let back = Model::load(dir.path(), "m").unwrap();
        assert_eq!(back, m);
        assert!(matches!(Model::load(dir.path(), "missing"), Err(CoreError::MissingArtifact(_))));
    }
}
