use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use xvqa_nn::rng::{derive_seed, stream, StreamRng};
use xvqa_nn::{Tensor, TensorArchive};

use super::language::{caption_concepts, CaptionKind, SOURCE};
use super::question::{absent_filter, choose_descriptor, present_filter, referable, unique_descriptors};
use super::{
    answers, default_target_languages, featurize_scene, generate_question, generate_scene, inject_text_bias,
    AttrWeights, AttributeEmbeddings, BiasSpec, Filter, LanguageConfig, QType, Question, Scene, SceneConfig,
    VisualFeatures, Vocabulary,
};
use crate::{io_err, CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Dev,
    Test,
    Fewshot,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Pretrain, Split::Train, Split::Dev, Split::Test, Split::Fewshot];

    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
            Split::Fewshot => "fewshot",
        }
    }
}

/// Relative frequency of each question type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QtypeMix {
    pub verify: f64,
    pub logical: f64,
    pub compare: f64,
    pub query: f64,
    pub choose: f64,
}

impl Default for QtypeMix {
    /// GQA test-dev question counts per structural type.
    fn default() -> Self {
        Self { verify: 2251.0, logical: 1803.0, compare: 589.0, query: 6804.0, choose: 1129.0 }
    }
}

impl QtypeMix {
    pub fn weights(&self) -> [f64; 5] {
        [self.verify, self.logical, self.compare, self.query, self.choose]
    }

    /// Splits `total` into integer counts by largest remainder.
    pub fn apportion(&self, total: usize) -> [usize; 5] {
        let w = self.weights();
        let sum: f64 = w.iter().sum();
        let exact: Vec<f64> = w.iter().map(|x| x / sum * total as f64).collect();
        let mut counts = [0usize; 5];
        for (c, e) in counts.iter_mut().zip(&exact) {
            *c = e.floor() as usize;
        }
        let mut order: Vec<usize> = (0..5).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
        let missing = total - counts.iter().sum::<usize>();
        for &i in order.iter().take(missing) {
            counts[i] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub pretrain_scenes: usize,
    pub train_scenes: usize,
    pub dev_scenes: usize,
    pub test_scenes: usize,
    pub fewshot_scenes: usize,
    pub questions_per_scene: usize,
    /// Declarative captions per pretraining scene.
    pub captions_per_scene: usize,
    /// Unanswered questions per pretraining scene, used as extra
    /// masked-token text.
    pub question_texts_per_scene: usize,
    /// Fraction of pretraining scenes held out for pretraining diagnostics.
    pub heldout_fraction: f64,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub scenes: SceneConfig,
    pub qtype_mix: QtypeMix,
    pub attr_weights: AttrWeights,
    pub languages: Vec<LanguageConfig>,
    pub bias: Vec<BiasSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pretrain_scenes: 500,
            train_scenes: 700,
            dev_scenes: 60,
            test_scenes: 120,
            fewshot_scenes: 48,
            questions_per_scene: 5,
            captions_per_scene: 4,
            question_texts_per_scene: 2,
            heldout_fraction: 0.1,
            feature_dim: 32,
            feature_noise: 0.1,
            scenes: SceneConfig::default(),
            qtype_mix: QtypeMix::default(),
            attr_weights: AttrWeights::default(),
            languages: default_target_languages(),
            bias: Vec::new(),
        }
    }
}

pub const MIN_FEWSHOT_SCENES: usize = 48;

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenes.validate()?;
        self.attr_weights.validate()?;
        BiasSpec::validate(&self.bias)?;
        if self.train_scenes == 0 || self.dev_scenes == 0 || self.test_scenes == 0 || self.pretrain_scenes < 2 {
            return Err(CoreError::Config(
                "insufficient scenes: train, dev and test need at least one scene each, pretraining at least two"
                    .into(),
            ));
        }
        if self.fewshot_scenes < MIN_FEWSHOT_SCENES {
            return Err(CoreError::Config(format!(
                "insufficient scenes: the few-shot pool needs at least {MIN_FEWSHOT_SCENES}, got {}",
                self.fewshot_scenes
            )));
        }
        if self.questions_per_scene == 0 || self.feature_dim == 0 || !(self.feature_noise >= 0.0) {
            return Err(CoreError::Config("questions_per_scene and feature_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(CoreError::Config("heldout_fraction must lie in [0, 1)".into()));
        }
        let w = self.qtype_mix.weights();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(CoreError::Config("qtype_mix weights must be non-negative with a positive sum".into()));
        }
        if self.languages.is_empty() {
            return Err(CoreError::Config("at least one target language is required".into()));
        }
        Ok(())
    }

    fn split_sizes(&self) -> [(Split, usize); 5] {
        [
            (Split::Pretrain, self.pretrain_scenes),
            (Split::Train, self.train_scenes),
            (Split::Dev, self.dev_scenes),
            (Split::Test, self.test_scenes),
            (Split::Fewshot, self.fewshot_scenes),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub scene: Scene,
    pub split: Split,
    pub visual: VisualFeatures,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetSplits {
    /// Source language only.
    pub train: Vec<Question>,
    /// Source language only.
    pub dev: Vec<Question>,
    /// Every language.
    pub test: Vec<Question>,
    /// Every language; questions about the few-shot pool scenes.
    pub fewshot: Vec<Question>,
    /// Target language → scene ids available for few-shot adaptation.
    pub fewshot_pools: BTreeMap<String, Vec<u64>>,
}

impl DatasetSplits {
    pub fn questions(&self, split: Split) -> &[Question] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
            Split::Fewshot => &self.fewshot,
            Split::Pretrain => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub scene_id: u64,
    /// Declarative statements are true of their scene and take part in
    /// image–text matching; question texts are only used for masked tokens.
    pub statement: bool,
    #[serde(skip)]
    pub kind: Option<CaptionKind>,
    pub renderings: BTreeMap<String, Vec<u32>>,
}

/// A caption paired with an image, either its own scene or one it is
/// false about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItmPair {
    pub caption: usize,
    pub image: u64,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PretrainCorpus {
    pub captions: Vec<Caption>,
    pub train_pairs: Vec<ItmPair>,
    pub heldout_pairs: Vec<ItmPair>,
    /// Caption indices reserved for masked-token evaluation.
    pub heldout_captions: Vec<usize>,
}

/// One line of the dataset manifest: a question in one language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub qid: String,
    pub scene_id: u64,
    pub split: Split,
    pub qtype: QType,
    pub language: String,
    pub tokens: Vec<u32>,
    pub answer: usize,
    pub cue: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub vocab: Vocabulary,
    pub scenes: BTreeMap<u64, SceneRecord>,
    pub splits: DatasetSplits,
    pub corpus: PretrainCorpus,
}

fn question_seed(cfg: &DataConfig, scene_id: u64, attempt: u64) -> u64 {
    derive_seed(cfg.seed, "question", scene_id.wrapping_mul(1 << 16) + attempt)
}

fn render_all(vocab: &Vocabulary, q: &mut Question, langs: &[String]) -> Result<()> {
    for l in langs {
        let body = vocab.render_body(&q.form, q.cue, l)?;
        q.renderings.insert(l.clone(), body);
    }
    Ok(())
}

/// Questions for the given scenes with the configured type proportions.
/// Types a scene cannot support are deferred to later scenes.
fn questions_for(cfg: &DataConfig, split: Split, scenes: &[&Scene]) -> Vec<Question> {
    let total = scenes.len() * cfg.questions_per_scene;
    let counts = cfg.qtype_mix.apportion(total);
    let mut plan: Vec<QType> = QType::ALL.iter().zip(counts).flat_map(|(&q, c)| std::iter::repeat_n(q, c)).collect();
    plan.shuffle(&mut stream(cfg.seed, "qtype_plan", split as u64));
    let mut pending: VecDeque<QType> = plan.into();
    let mut out = Vec::with_capacity(total);
    let mut attempt = 0u64;
    for scene in scenes {
        for slot in 0..cfg.questions_per_scene {
            for _ in 0..pending.len().min(10) {
                let qt = pending.pop_front().expect("non-empty");
                attempt += 1;
                match generate_question(scene, qt, question_seed(cfg, scene.scene_id, attempt), &cfg.attr_weights) {
                    Ok(mut q) => {
                        q.qid = format!("{}-{}-{}", split.name(), scene.scene_id, slot);
                        out.push(q);
                        break;
                    }
                    Err(_) => pending.push_back(qt),
                }
            }
        }
    }
    out
}

fn caption_holds(kind: &CaptionKind, scene: &Scene) -> bool {
    let count = |f: &Filter| scene.objects.iter().filter(|o| f.matches(o)).count();
    let unique = |f: &Filter| {
        let m: Vec<_> = scene.objects.iter().filter(|o| f.matches(o)).collect();
        (m.len() == 1).then(|| m[0])
    };
    match kind {
        CaptionKind::ThereIs(f) => count(f) > 0,
        CaptionKind::HasValue { target, attr, value } | CaptionKind::AttrOf { target, attr, value } => {
            unique(target).is_some_and(|o| o.get(*attr) == *value)
        }
        CaptionKind::Relative { a, b, larger } => match (unique(a), unique(b)) {
            (Some(oa), Some(ob)) => oa.size != ob.size && (oa.size > ob.size) == *larger,
            _ => false,
        },
        CaptionKind::Pair { a, b, conj_and } => {
            if *conj_and {
                count(a) > 0 && count(b) > 0
            } else {
                count(a) > 0 || count(b) > 0
            }
        }
    }
}

fn sample_caption(scene: &Scene, rng: &mut StreamRng) -> Option<CaptionKind> {
    use super::Attr;
    let kind = match rng.random_range(0..5) {
        0 => CaptionKind::ThereIs(present_filter(scene, rng)),
        1 | 2 => {
            let attr = *Attr::ALL.choose(rng).expect("non-empty");
            let (i, target) = referable(scene, rng, Some(attr))?;
            let value = scene.objects[i].get(attr);
            if rng.random_bool(0.5) {
                CaptionKind::HasValue { target, attr, value }
            } else {
                CaptionKind::AttrOf { target, attr, value }
            }
        }
        3 => {
            let n = scene.objects.len();
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
            let (oi, oj) = (&scene.objects[i], &scene.objects[j]);
            if oi.size == oj.size {
                return None;
            }
            let a = choose_descriptor(rng, unique_descriptors(scene, i, None))?;
            let b = choose_descriptor(rng, unique_descriptors(scene, j, None))?;
            CaptionKind::Relative { a, b, larger: oi.size > oj.size }
        }
        _ => {
            let a = present_filter(scene, rng);
            let conj_and = rng.random_bool(0.6);
            let b =
                if conj_and || rng.random_bool(0.5) { present_filter(scene, rng) } else { absent_filter(scene, rng)? };
            if a == b {
                return None;
            }
            CaptionKind::Pair { a, b, conj_and }
        }
    };
    debug_assert!(caption_holds(&kind, scene));
    Some(kind)
}

fn build_corpus(cfg: &DataConfig, vocab: &Vocabulary, scenes: &[&Scene]) -> Result<PretrainCorpus> {
    let langs = vocab.language_names();
    let mut corpus = PretrainCorpus::default();
    let n_heldout = ((scenes.len() as f64 * cfg.heldout_fraction).round() as usize).min(scenes.len() - 1);
    let first_heldout = scenes.len() - n_heldout;
    for (pos, scene) in scenes.iter().enumerate() {
        let heldout = pos >= first_heldout;
        let mut rng = stream(cfg.seed, "captions", scene.scene_id);
        let mut made = 0;
        for _ in 0..cfg.captions_per_scene * 20 {
            if made == cfg.captions_per_scene {
                break;
            }
            let Some(kind) = sample_caption(scene, &mut rng) else {
                continue;
            };
            let concepts = caption_concepts(kind);
            let mut renderings = BTreeMap::new();
            for l in &langs {
                renderings.insert(l.clone(), vocab.language(l)?.realize(&concepts)?);
            }
            let idx = corpus.captions.len();
            corpus.captions.push(Caption { scene_id: scene.scene_id, statement: true, kind: Some(kind), renderings });
            if heldout {
                corpus.heldout_captions.push(idx);
            }
            made += 1;
        }
        // unanswered question texts, optionally with a qtype prefix and a
        // random cue, so those tokens are seen during pretraining
        for k in 0..cfg.question_texts_per_scene {
            let qt = *QType::ALL.choose(&mut rng).expect("non-empty");
            let seed = derive_seed(cfg.seed, "pretrain_question", scene.scene_id * 64 + k as u64);
            let Ok(mut q) = generate_question(scene, qt, seed, &cfg.attr_weights) else {
                continue;
            };
            q.cue = rng.random_bool(0.5).then(|| rng.random_range(0..answers::NUM_CLASSES));
            let prefix = rng.random_bool(0.5);
            let mut renderings = BTreeMap::new();
            for l in &langs {
                renderings.insert(l.clone(), vocab.render(&q, l, prefix)?);
            }
            let idx = corpus.captions.len();
            corpus.captions.push(Caption { scene_id: scene.scene_id, statement: false, kind: None, renderings });
            if heldout {
                corpus.heldout_captions.push(idx);
            }
        }
    }
    // image–text pairs: half matched, half paired with a scene of the same
    // partition that the caption is false about
    let by_id: BTreeMap<u64, (&Scene, bool)> =
        scenes.iter().enumerate().map(|(p, s)| (s.scene_id, (*s, p >= first_heldout))).collect();
    let train_ids: Vec<u64> = scenes[..first_heldout].iter().map(|s| s.scene_id).collect();
    let heldout_ids: Vec<u64> = scenes[first_heldout..].iter().map(|s| s.scene_id).collect();
    let mut rng = stream(cfg.seed, "itm_pairs", 0);
    for (idx, cap) in corpus.captions.iter().enumerate().filter(|(_, c)| c.statement) {
        let heldout = by_id[&cap.scene_id].1;
        let pool = if heldout { &heldout_ids } else { &train_ids };
        let pair = if rng.random_bool(0.5) || pool.len() < 2 {
            Some(ItmPair { caption: idx, image: cap.scene_id, matched: true })
        } else {
            let kind = cap.kind.as_ref().expect("statements carry their kind");
            (0..20).find_map(|_| {
                let other = *pool.choose(&mut rng).expect("non-empty pool");
                (other != cap.scene_id && !caption_holds(kind, by_id[&other].0)).then_some(ItmPair {
                    caption: idx,
                    image: other,
                    matched: false,
                })
            })
        };
        if let Some(p) = pair {
            if heldout {
                corpus.heldout_pairs.push(p);
            } else {
                corpus.train_pairs.push(p);
            }
        }
    }
    Ok(corpus)
}

/// Generates every scene, question, rendering and caption from `cfg`.
/// Scene ids are allocated in contiguous, disjoint ranges per split.
pub fn build_corpus_and_splits(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let vocab = Vocabulary::build(&cfg.languages, cfg.seed)?;
    let emb = AttributeEmbeddings::new(derive_seed(cfg.seed, "embeddings", 0), cfg.feature_dim);
    let noise_seed = derive_seed(cfg.seed, "noise", 0);
    let mut scenes = BTreeMap::new();
    let mut by_split: BTreeMap<Split, Vec<u64>> = BTreeMap::new();
    let mut next_id = 0u64;
    for (split, n) in cfg.split_sizes() {
        for _ in 0..n {
            let scene = generate_scene(cfg.seed, next_id, &cfg.scenes)?;
            let visual = featurize_scene(&scene, &emb, cfg.feature_noise, noise_seed);
            scenes.insert(next_id, SceneRecord { scene, split, visual });
            by_split.entry(split).or_default().push(next_id);
            next_id += 1;
        }
    }
    let scene_refs = |split: Split| -> Vec<&Scene> { by_split[&split].iter().map(|id| &scenes[id].scene).collect() };
    let all_langs = vocab.language_names();
    let source_only = vec![SOURCE.to_string()];
    let mut splits = DatasetSplits::default();
    for (split, langs) in [
        (Split::Train, &source_only),
        (Split::Dev, &source_only),
        (Split::Test, &all_langs),
        (Split::Fewshot, &all_langs),
    ] {
        let mut qs = questions_for(cfg, split, &scene_refs(split));
        for q in &mut qs {
            render_all(&vocab, q, langs)?;
        }
        inject_text_bias(&mut qs, &vocab, &cfg.bias, derive_seed(cfg.seed, "bias", split as u64))?;
        match split {
            Split::Train => splits.train = qs,
            Split::Dev => splits.dev = qs,
            Split::Test => splits.test = qs,
            _ => splits.fewshot = qs,
        }
    }
    for l in &all_langs[1..] {
        splits.fewshot_pools.insert(l.clone(), by_split[&Split::Fewshot].clone());
    }
    let corpus = build_corpus(cfg, &vocab, &scene_refs(Split::Pretrain))?;
    Ok(Dataset { config: cfg.clone(), vocab, scenes, splits, corpus })
}

#[derive(Serialize, Deserialize)]
struct SceneLine {
    split: Split,
    scene: Scene,
}

#[derive(Serialize, Deserialize)]
struct QuestionLine {
    split: Split,
    #[serde(flatten)]
    question: Question,
}

fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path.display()))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(&item).map_err(|e| CoreError::Serde(e.to_string()))?;
        writeln!(w, "{line}").map_err(io_err(path.display()))?;
    }
    w.flush().map_err(io_err(path.display()))
}

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(io_err(path.display()))?;
    BufReader::new(file)
        .lines()
        .map(|line| {
            let line = line.map_err(io_err(path.display()))?;
            serde_json::from_str(&line).map_err(|e| CoreError::Serde(format!("{}: {e}", path.display())))
        })
        .collect()
}

impl Dataset {
    pub fn questions(&self, split: Split) -> &[Question] {
        self.splits.questions(split)
    }

    pub fn visual(&self, scene_id: u64) -> Result<&VisualFeatures> {
        self.scenes
            .get(&scene_id)
            .map(|r| &r.visual)
            .ok_or_else(|| CoreError::Input(format!("unknown scene {scene_id}")))
    }

    pub fn scene_ids(&self, split: Split) -> Vec<u64> {
        self.scenes.values().filter(|r| r.split == split).map(|r| r.scene.scene_id).collect()
    }

    /// One record per (question, rendered language), in split order.
    pub fn manifest_records(&self) -> Vec<ManifestRecord> {
        let mut out = Vec::new();
        for split in [Split::Train, Split::Dev, Split::Test, Split::Fewshot] {
            for q in self.questions(split) {
                for (lang, tokens) in &q.renderings {
                    out.push(ManifestRecord {
                        qid: q.qid.clone(),
                        scene_id: q.scene_id,
                        split,
                        qtype: q.qtype,
                        language: lang.clone(),
                        tokens: tokens.clone(),
                        answer: q.answer,
                        cue: q.cue.is_some(),
                    });
                }
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir.display()))?;
        let cfg = toml::to_string(&self.config).map_err(|e| CoreError::Serde(e.to_string()))?;
        fs::write(dir.join("data_config.toml"), cfg).map_err(io_err("data_config.toml"))?;
        let vocab = serde_json::to_string_pretty(&self.vocab).map_err(|e| CoreError::Serde(e.to_string()))?;
        fs::write(dir.join("vocab.json"), vocab).map_err(io_err("vocab.json"))?;
        write_lines(&dir.join("manifest.jsonl"), self.manifest_records())?;
        write_lines(
            &dir.join("scenes.jsonl"),
            self.scenes.values().map(|r| SceneLine { split: r.split, scene: r.scene.clone() }),
        )?;
        let mut questions = Vec::new();
        for split in [Split::Train, Split::Dev, Split::Test, Split::Fewshot] {
            questions.extend(self.questions(split).iter().map(|q| QuestionLine { split, question: q.clone() }));
        }
        write_lines(&dir.join("questions.jsonl"), questions)?;
        let pools =
            serde_json::to_string_pretty(&self.splits.fewshot_pools).map_err(|e| CoreError::Serde(e.to_string()))?;
        fs::write(dir.join("fewshot_pools.json"), pools).map_err(io_err("fewshot_pools.json"))?;
        write_lines(&dir.join("captions.jsonl"), &self.corpus.captions)?;
        let pairs = serde_json::json!({
            "train_pairs": self.corpus.train_pairs,
            "heldout_pairs": self.corpus.heldout_pairs,
            "heldout_captions": self.corpus.heldout_captions,
        });
        fs::write(dir.join("itm_pairs.json"), pairs.to_string()).map_err(io_err("itm_pairs.json"))?;
        let mut archive = TensorArchive::new();
        for (id, r) in &self.scenes {
            archive.push(format!("scene/{id}/features"), r.split.name(), r.visual.features.clone());
            archive.push(format!("scene/{id}/spatial"), r.split.name(), r.visual.spatial.clone());
        }
        archive.save(&dir.join("features.bin"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let need = |name: &str| {
            let p = dir.join(name);
            if p.exists() {
                Ok(p)
            } else {
                Err(CoreError::MissingArtifact(p.display().to_string()))
            }
        };
        let cfg_text = fs::read_to_string(need("data_config.toml")?).map_err(io_err("data_config.toml"))?;
        let config: DataConfig = toml::from_str(&cfg_text).map_err(|e| CoreError::Serde(e.to_string()))?;
        let vocab_text = fs::read_to_string(need("vocab.json")?).map_err(io_err("vocab.json"))?;
        let vocab: Vocabulary = serde_json::from_str(&vocab_text).map_err(|e| CoreError::Serde(e.to_string()))?;
        let archive = TensorArchive::load(&need("features.bin")?)?;
        let mut scenes = BTreeMap::new();
        for line in read_lines::<SceneLine>(&need("scenes.jsonl")?)? {
            let id = line.scene.scene_id;
            let get = |what: &str| -> Result<Tensor> {
                archive
                    .get(&format!("scene/{id}/{what}"))
                    .cloned()
                    .ok_or_else(|| CoreError::MissingArtifact(format!("features for scene {id}")))
            };
            let visual = VisualFeatures {
                features: get("features")?,
                spatial: get("spatial")?,
                count: line.scene.objects.len(),
            };
            scenes.insert(id, SceneRecord { scene: line.scene, split: line.split, visual });
        }
        let mut splits = DatasetSplits::default();
        for line in read_lines::<QuestionLine>(&need("questions.jsonl")?)? {
            match line.split {
                Split::Train => splits.train.push(line.question),
                Split::Dev => splits.dev.push(line.question),
                Split::Test => splits.test.push(line.question),
                Split::Fewshot => splits.fewshot.push(line.question),
                Split::Pretrain => {}
            }
        }
        let pools_text = fs::read_to_string(need("fewshot_pools.json")?).map_err(io_err("fewshot_pools.json"))?;
        splits.fewshot_pools = serde_json::from_str(&pools_text).map_err(|e| CoreError::Serde(e.to_string()))?;
        let captions: Vec<Caption> = read_lines(&need("captions.jsonl")?)?;
        #[derive(Deserialize)]
        struct Pairs {
            train_pairs: Vec<ItmPair>,
            heldout_pairs: Vec<ItmPair>,
            heldout_captions: Vec<usize>,
        }
        let pairs_text = fs::read_to_string(need("itm_pairs.json")?).map_err(io_err("itm_pairs.json"))?;
        let pairs: Pairs = serde_json::from_str(&pairs_text).map_err(|e| CoreError::Serde(e.to_string()))?;
        let corpus = PretrainCorpus {
            captions,
            train_pairs: pairs.train_pairs,
            heldout_pairs: pairs.heldout_pairs,
            heldout_captions: pairs.heldout_captions,
        };
        Ok(Dataset { config, vocab, scenes, splits, corpus })
    }
}
