//! Experiment orchestration: TOML configs, content-addressed stage caching,
//! the generate → pretrain → fine-tune → evaluate/ablate → few-shot → report
//! pipeline, comparison tables, trend checks and auditing.

mod config;
mod tables;

pub use config::{
    ArmConfig, EvaluateSection, ExperimentConfig, FewshotSection, FinetuneSection, Layout, ModelSection, ReportSection,
    TrendSpec,
};
pub use tables::{
    emit_comparison, fewshot_protocol, mean_std, trend_check, Hypothesis, TrendStatus, TrendSummary, MIN_TREND_SEEDS,
};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::diagnostics::{
    evaluate, training_examples, transfer_gap, AblationMode, AccuracyTable, EvalReport, Protocol,
};
use crate::model::Model;
use crate::synthdata::{build_corpus_and_splits, Dataset, Split, SOURCE};
use crate::training::{
    evaluate_pretraining, fewshot_adapt, finetune_from_stage1, finetune_stage1, pretrain, write_log, LogRecord,
    PretrainedSnapshot, StageOne, TrainedModel,
};
use crate::{io_err, CoreError, Result};

pub const SOFTWARE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// How a stage treats missing artifacts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Need {
    /// Compute this stage and anything upstream that is missing.
    Compute,
    /// Compute this stage; upstream artifacts must already exist.
    ComputeOwn,
    /// Load only; a missing artifact is an error.
    Require,
}

impl Need {
    fn up(self) -> Need {
        match self {
            Need::Compute => Need::Compute,
            Need::ComputeOwn | Need::Require => Need::Require,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub label: String,
    pub key: String,
    pub path: String,
    pub cache_hit: bool,
    pub seconds: f64,
}

/// Written at the root of the output directory after every command.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub software_version: String,
    pub stages: Vec<StageRecord>,
    pub seconds_per_stage: BTreeMap<String, f64>,
    /// Report file name → path relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    fn record(&mut self, r: StageRecord) {
        *self.seconds_per_stage.entry(r.stage.clone()).or_default() += r.seconds;
        self.stages.retain(|s| !(s.stage == r.stage && s.key == r.key));
        self.stages.push(r);
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = fs::read_to_string(path).map_err(|_| CoreError::MissingArtifact(path.display().to_string()))?;
        serde_json::from_str(&text).map_err(|e| CoreError::Serde(e.to_string()))
    }
}

/// Outcome of re-deriving every reported number from the raw count files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub cells_checked: usize,
    pub files_checked: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    config_hash: String,
    seeds: Vec<u64>,
    report: EvalReport,
}

#[derive(Serialize, Deserialize)]
struct Stage1File {
    steps: u64,
    log: Vec<LogRecord>,
}

fn stage_key(stage: &str, inputs: serde_json::Value) -> String {
    let text = json!({ "stage": stage, "version": SOFTWARE_VERSION, "inputs": inputs }).to_string();
    hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string()
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| CoreError::Serde(e.to_string()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|_| CoreError::MissingArtifact(path.display().to_string()))?;
    serde_json::from_str(&text).map_err(|e| CoreError::Serde(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir.display()))?;
    }
    fs::write(path, text).map_err(io_err(path.display()))
}

/// Runs pipeline stages for one config into one output directory.
pub struct Runner {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    config_hash: String,
    manifest: RunManifest,
    /// Stages touched by this runner, in order.
    session: Vec<StageRecord>,
    threads: usize,
    dataset: Option<Dataset>,
    snapshot: Option<PretrainedSnapshot>,
}

const COMPLETE: &str = "complete.json";

impl Runner {
    pub fn new(config: ExperimentConfig, out: &Path) -> Result<Runner> {
        config.validate()?;
        let config_hash = config.hash();
        fs::create_dir_all(out).map_err(io_err(out.display()))?;
        write(&out.join("config.toml"), &config.to_toml()?)?;
        let manifest = match RunManifest::load(&out.join("manifest.json")) {
            Ok(m) if m.config_hash == config_hash => m,
            _ => RunManifest {
                config_hash: config_hash.clone(),
                software_version: SOFTWARE_VERSION.into(),
                ..RunManifest::default()
            },
        };
        Ok(Runner {
            config,
            out: out.to_path_buf(),
            config_hash,
            manifest,
            session: Vec::new(),
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
            dataset: None,
            snapshot: None,
        })
    }

    /// Worker threads for independent seeds; defaults to the core count.
    pub fn with_threads(mut self, n: usize) -> Runner {
        self.threads = n.max(1);
        self
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    /// Stage records of this runner only; the manifest also keeps earlier runs.
    pub fn session(&self) -> &[StageRecord] {
        &self.session
    }

    fn stage_dir(&self, stage: &str, key: &str) -> PathBuf {
        self.out.join("cache").join(stage).join(key)
    }

    fn is_complete(&self, stage: &str, key: &str) -> bool {
        self.stage_dir(stage, key).join(COMPLETE).exists()
    }

    fn mark_complete(&self, stage: &str, key: &str) -> Result<()> {
        let marker = json!({ "stage": stage, "key": key, "software_version": SOFTWARE_VERSION });
        write(&self.stage_dir(stage, key).join(COMPLETE), &to_json(&marker)?)
    }

    fn missing(&self, stage: &str, label: &str) -> CoreError {
        CoreError::MissingArtifact(format!("{stage} output for {label} (run the {stage} stage first)"))
    }

    fn record(&mut self, stage: &str, label: String, key: &str, hit: bool, started: Instant) {
        let path =
            self.stage_dir(stage, key).strip_prefix(&self.out).map(|p| p.display().to_string()).unwrap_or_default();
        let seconds = if hit { 0.0 } else { started.elapsed().as_secs_f64() };
        let r = StageRecord { stage: stage.into(), label, key: key.into(), path, cache_hit: hit, seconds };
        self.session.push(r.clone());
        self.manifest.record(r);
    }

    pub fn write_manifest(&self) -> Result<()> {
        write(&self.out.join("manifest.json"), &to_json(&self.manifest)?)
    }

    // ---- keys ----

    fn generate_key(&self) -> String {
        stage_key("generate", json!({ "data": self.config.data }))
    }

    fn pretrain_key(&self) -> String {
        stage_key(
            "pretrain",
            json!({
                "data": self.generate_key(),
                "model": self.config.model,
                "pretrain": self.config.pretrain,
                "seed": self.config.pretrain_seed,
            }),
        )
    }

    fn mode_inputs(&self, mode: AblationMode) -> serde_json::Value {
        match mode {
            AblationMode::GaussianVisual => {
                json!({ "mode": mode, "stats": self.config.evaluate.gaussian_stats })
            }
            _ => json!({ "mode": mode }),
        }
    }

    fn stage1_key(&self, arm: &ArmConfig, seed: u64, mode: AblationMode) -> Result<String> {
        let fc = self.config.finetune.for_arm(arm)?;
        let s = &fc.schedule;
        Ok(stage_key(
            "stage1",
            json!({
                "snapshot": self.pretrain_key(),
                "mask": fc.mask(1)?,
                "epochs": arm.strategy.stage_epochs(s)[0],
                "lr": s.lr, "batch_size": s.batch_size, "weight_decay": s.weight_decay, "clip_norm": s.clip_norm,
                "head": arm.head, "with_qtype": arm.with_qtype,
                "inputs": self.mode_inputs(mode),
                "seed": seed,
            }),
        ))
    }

    fn finetune_key(&self, arm: &ArmConfig, seed: u64, mode: AblationMode) -> Result<String> {
        Ok(stage_key(
            "finetune",
            json!({
                "stage1": self.stage1_key(arm, seed, mode)?,
                "config": self.config.finetune.for_arm(arm)?,
            }),
        ))
    }

    fn languages(&mut self, need: Need) -> Result<Vec<String>> {
        match &self.config.evaluate.languages {
            Some(l) => Ok(l.clone()),
            None => Ok(self.dataset(need)?.vocab.language_names()),
        }
    }

    fn eval_key(&self, arm: &ArmConfig, seed: u64, protocol: Protocol, languages: &[String]) -> Result<String> {
        Ok(stage_key(
            "eval",
            json!({
                "model": self.finetune_key(arm, seed, protocol.train_mode())?,
                "eval": self.mode_inputs(protocol.eval_mode()),
                "languages": languages,
                "seed": seed,
            }),
        ))
    }

    fn fewshot_key(&self, arm: &ArmConfig, seed: u64, lang: &str, k: usize) -> Result<String> {
        Ok(stage_key(
            "fewshot",
            json!({
                "model": self.finetune_key(arm, seed, AblationMode::Identity)?,
                "language": lang, "shots": k,
                "train": self.config.fewshot.train,
                "seed": seed,
            }),
        ))
    }

    // ---- stages ----

    pub fn dataset(&mut self, need: Need) -> Result<&Dataset> {
        if self.dataset.is_none() {
            let key = self.generate_key();
            let dir = self.stage_dir("generate", &key);
            let t = Instant::now();
            let hit = self.is_complete("generate", &key);
            let ds = if hit {
                Dataset::load(&dir)?
            } else if need == Need::Require {
                return Err(self.missing("generate", "the dataset"));
            } else {
                let ds = build_corpus_and_splits(&self.config.data)?;
                ds.save(&dir)?;
                self.mark_complete("generate", &key)?;
                ds
            };
            self.record("generate", "dataset".into(), &key, hit, t);
            self.dataset = Some(ds);
        }
        Ok(self.dataset.as_ref().expect("dataset loaded"))
    }

    pub fn snapshot(&mut self, need: Need) -> Result<&PretrainedSnapshot> {
        if self.snapshot.is_none() {
            let key = self.pretrain_key();
            let dir = self.stage_dir("pretrain", &key);
            let t = Instant::now();
            let hit = self.is_complete("pretrain", &key);
            let snap = if hit {
                PretrainedSnapshot::load(&dir)?
            } else if need == Need::Require {
                return Err(self.missing("pretrain", "the snapshot"));
            } else {
                let model_section = self.config.model.clone();
                let (pcfg, seed) = (self.config.pretrain.clone(), self.config.pretrain_seed);
                let ds = self.dataset(need.up())?;
                let mcfg = model_section.resolve(ds.vocab.size, ds.config.feature_dim)?;
                let t = Instant::now();
                let snap = pretrain(&mcfg, ds, &pcfg, seed)?;
                let metrics = evaluate_pretraining(&snap, ds, seed)?;
                snap.save(&dir)?;
                write(&dir.join("metrics.json"), &to_json(&metrics)?)?;
                self.mark_complete("pretrain", &key)?;
                self.record("pretrain", "snapshot".into(), &key, false, t);
                self.snapshot = Some(snap);
                return Ok(self.snapshot.as_ref().expect("snapshot set"));
            };
            self.record("pretrain", "snapshot".into(), &key, hit, t);
            self.snapshot = Some(snap);
        }
        Ok(self.snapshot.as_ref().expect("snapshot loaded"))
    }

    fn inputs(
        &mut self,
        mode: AblationMode,
        seed: u64,
        need: Need,
    ) -> Result<(Vec<crate::model::Example>, Vec<crate::model::Example>)> {
        let stats = self.config.evaluate.gaussian_stats;
        training_examples(self.dataset(need)?, mode, seed, stats)
    }

    fn stage1(&mut self, arm: &ArmConfig, seed: u64, mode: AblationMode, need: Need) -> Result<StageOne> {
        let key = self.stage1_key(arm, seed, mode)?;
        let dir = self.stage_dir("stage1", &key);
        let label = format!("{}/seed{seed}/{mode:?}", arm.label());
        if self.is_complete("stage1", &key) {
            let meta: Stage1File = read_json(&dir.join("stage1.json"))?;
            let model = Model::load(&dir, "model")?;
            self.record("stage1", label, &key, true, Instant::now());
            return Ok(StageOne { model, log: meta.log, steps: meta.steps });
        }
        if need == Need::Require {
            return Err(self.missing("finetune", &label));
        }
        let fc = self.config.finetune.for_arm(arm)?;
        let (train, dev) = self.inputs(mode, seed, need.up())?;
        self.snapshot(need.up())?;
        let t = Instant::now();
        let s1 = finetune_stage1(self.snapshot.as_ref().expect("snapshot loaded"), &train, &dev, &fc, seed)?;
        s1.model.save(&dir, "model")?;
        write(&dir.join("stage1.json"), &to_json(&Stage1File { steps: s1.steps, log: s1.log.clone() })?)?;
        self.mark_complete("stage1", &key)?;
        self.record("stage1", label, &key, false, t);
        Ok(s1)
    }

    /// Fine-tuned model of `arm` for `seed`, trained on inputs rewritten by `mode`.
    pub fn trained(&mut self, arm: &ArmConfig, seed: u64, mode: AblationMode, need: Need) -> Result<TrainedModel> {
        let key = self.finetune_key(arm, seed, mode)?;
        let dir = self.stage_dir("finetune", &key);
        let label = format!("{}/seed{seed}/{mode:?}", arm.label());
        if self.is_complete("finetune", &key) {
            let m = TrainedModel::load(&dir, "model")?;
            self.record("finetune", label, &key, true, Instant::now());
            return Ok(m);
        }
        if need == Need::Require {
            return Err(self.missing("finetune", &label));
        }
        let s1 = self.stage1(arm, seed, mode, need)?;
        let fc = self.config.finetune.for_arm(arm)?;
        let (train, dev) = self.inputs(mode, seed, need.up())?;
        self.snapshot(need.up())?;
        let t = Instant::now();
        let outcome =
            finetune_from_stage1(self.snapshot.as_ref().expect("snapshot loaded"), s1, &train, &dev, &fc, seed)?;
        outcome.trained.save(&dir, "model")?;
        write_log(&dir.join("log.jsonl"), &outcome.log)?;
        write(&dir.join("phase_steps.json"), &to_json(&outcome.phase_steps)?)?;
        self.mark_complete("finetune", &key)?;
        self.record("finetune", label, &key, false, t);
        Ok(outcome.trained)
    }

    /// Test-split counts of `arm`/`seed` under `protocol`.
    pub fn table(&mut self, arm: &ArmConfig, seed: u64, protocol: Protocol, need: Need) -> Result<AccuracyTable> {
        let languages = self.languages(need.up())?;
        let key = self.eval_key(arm, seed, protocol, &languages)?;
        let dir = self.stage_dir("eval", &key);
        let label = format!("{}/seed{seed}/{protocol}", arm.label());
        if self.is_complete("eval", &key) {
            let t = read_json(&dir.join("table.json"))?;
            self.record("eval", label, &key, true, Instant::now());
            return Ok(t);
        }
        if need == Need::Require {
            let stage = if protocol == Protocol::Mm { "evaluate" } else { "ablate" };
            return Err(self.missing(stage, &label));
        }
        let model_need = if protocol.uses_multimodal_model() { need.up() } else { need };
        let model = self.trained(arm, seed, protocol.train_mode(), model_need)?;
        let stats = self.config.evaluate.gaussian_stats;
        let t = Instant::now();
        let ds = self.dataset(need.up())?;
        let eval_seed = crate::diagnostics::sampler_seed(seed, 1);
        let table = evaluate(&model, ds, Split::Test, &languages, protocol.eval_mode(), eval_seed, stats)?;
        write(&dir.join("table.json"), &to_json(&table)?)?;
        self.mark_complete("eval", &key)?;
        self.record("eval", label, &key, false, t);
        Ok(table)
    }

    fn fewshot_languages(&mut self, need: Need) -> Result<Vec<String>> {
        match &self.config.fewshot.languages {
            Some(l) => Ok(l.clone()),
            None => Ok(self.dataset(need)?.vocab.language_names().into_iter().filter(|l| l != SOURCE).collect()),
        }
    }

    /// Counts on `lang`'s test questions after adapting on `k` scenes.
    pub fn fewshot_table(
        &mut self,
        arm: &ArmConfig,
        seed: u64,
        lang: &str,
        k: usize,
        need: Need,
    ) -> Result<AccuracyTable> {
        let key = self.fewshot_key(arm, seed, lang, k)?;
        let dir = self.stage_dir("fewshot", &key);
        let label = format!("{}/seed{seed}/{lang}/k{k}", arm.label());
        if self.is_complete("fewshot", &key) {
            let t = read_json(&dir.join("table.json"))?;
            self.record("fewshot", label, &key, true, Instant::now());
            return Ok(t);
        }
        if need == Need::Require {
            return Err(self.missing("fewshot", &label));
        }
        let model = self.trained(arm, seed, AblationMode::Identity, need.up())?;
        let fcfg = self.config.fewshot.train.clone();
        let stats = self.config.evaluate.gaussian_stats;
        let t = Instant::now();
        let ds = self.dataset(need.up())?;
        let adapted = fewshot_adapt(&model, ds, lang, k, &fcfg, seed)?;
        let table = evaluate(&adapted, ds, Split::Test, &[lang.to_string()], AblationMode::Identity, 0, stats)?;
        write(&dir.join("table.json"), &to_json(&table)?)?;
        self.mark_complete("fewshot", &key)?;
        self.record("fewshot", label, &key, false, t);
        Ok(table)
    }

    // ---- commands ----

    pub fn gen_data(&mut self) -> Result<()> {
        self.dataset(Need::Compute)?;
        self.write_manifest()
    }

    pub fn pretrain_stage(&mut self, need: Need) -> Result<()> {
        self.snapshot(need)?;
        self.write_manifest()
    }

    /// Worker copy sharing the loaded dataset and snapshot; its records are
    /// merged back by [`Runner::per_seed`].
    fn fork(&self) -> Runner {
        Runner {
            config: self.config.clone(),
            out: self.out.clone(),
            config_hash: self.config_hash.clone(),
            manifest: RunManifest::default(),
            session: Vec::new(),
            threads: 1,
            dataset: self.dataset.clone(),
            snapshot: self.snapshot.clone(),
        }
    }

    /// Runs `job` once per configured seed. Seeds are independent, so they are
    /// spread over the available cores; everything one seed touches, stage-1
    /// checkpoints included, stays on one worker.
    fn per_seed(&mut self, need: Need, job: impl Fn(&mut Runner, u64) -> Result<()> + Sync) -> Result<()> {
        let seeds = self.config.seeds.clone();
        let workers = self.threads.min(seeds.len());
        if workers <= 1 {
            return seeds.into_iter().try_for_each(|s| job(self, s));
        }
        if need == Need::Compute {
            self.snapshot(Need::Compute)?;
        } else if need == Need::ComputeOwn {
            self.dataset(Need::Require)?;
        }
        let job = &job;
        let results: Vec<(Runner, Result<()>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let mut r = self.fork();
                    let mine: Vec<u64> = seeds.iter().copied().skip(w).step_by(workers).collect();
                    scope.spawn(move || {
                        let res = mine.into_iter().try_for_each(|s| job(&mut r, s));
                        (r, res)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut first_err = None;
        for (r, res) in results {
            for rec in r.session {
                self.session.push(rec.clone());
                self.manifest.record(rec);
            }
            if let Err(e) = res {
                first_err.get_or_insert(e);
            }
        }
        first_err.map_or(Ok(()), Err)
    }

    pub fn finetune_stage(&mut self, need: Need) -> Result<()> {
        let arms = self.config.arms.clone();
        self.per_seed(need, |r, seed| {
            for arm in &arms {
                r.trained(arm, seed, AblationMode::Identity, need)?;
            }
            Ok(())
        })?;
        self.write_manifest()
    }

    pub fn evaluate_stage(&mut self, need: Need) -> Result<()> {
        self.protocol_stage(&[Protocol::Mm], need)
    }

    /// Every configured protocol other than MM, or just `only`.
    pub fn ablate_stage(&mut self, only: Option<Protocol>, need: Need) -> Result<()> {
        let protocols: Vec<Protocol> = match only {
            Some(p) => vec![p],
            None => self.config.evaluate.protocols.iter().copied().filter(|p| *p != Protocol::Mm).collect(),
        };
        self.protocol_stage(&protocols, need)
    }

    fn protocol_stage(&mut self, protocols: &[Protocol], need: Need) -> Result<()> {
        let arms = self.config.arms.clone();
        self.languages(need.up())?;
        self.per_seed(need, |r, seed| {
            for arm in &arms {
                for &p in protocols {
                    r.table(arm, seed, p, need)?;
                }
            }
            Ok(())
        })?;
        self.write_manifest()
    }

    pub fn fewshot_stage(&mut self, need: Need) -> Result<()> {
        let langs = self.fewshot_languages(need.up())?;
        let (arms, shots) = (self.config.arms.clone(), self.config.fewshot.shots.clone());
        self.per_seed(need, |r, seed| {
            for arm in &arms {
                for lang in &langs {
                    for &k in &shots {
                        r.fewshot_table(arm, seed, lang, k, need)?;
                    }
                }
            }
            Ok(())
        })?;
        self.write_manifest()
    }

    /// Assembles the report from every per-run count file.
    pub fn collect_report(&mut self, need: Need) -> Result<EvalReport> {
        let mut report = EvalReport::new(SOURCE);
        let mut protocols = vec![Protocol::Mm];
        protocols.extend(self.config.evaluate.protocols.iter().copied().filter(|p| *p != Protocol::Mm));
        let fewshot_langs =
            if self.config.fewshot.shots.is_empty() { Vec::new() } else { self.fewshot_languages(need)? };
        for arm in self.config.arms.clone() {
            let label = arm.label();
            for &seed in &self.config.seeds.clone() {
                for &p in &protocols {
                    let t = self.table(&arm, seed, p, need)?;
                    report.insert(p.name(), &label, seed, &t)?;
                }
                for &k in &self.config.fewshot.shots.clone() {
                    let mut combined = AccuracyTable::default();
                    for lang in &fewshot_langs {
                        let t = self.fewshot_table(&arm, seed, lang, k, need)?;
                        combined.cells.extend(t.cells);
                        combined.answers.extend(t.answers);
                    }
                    report.insert(&fewshot_protocol(k), &label, seed, &combined)?;
                }
            }
        }
        report.check_integrity()?;
        Ok(report)
    }

    /// Report files (name → contents) derived from `report`.
    pub fn render_report(&self, report: &EvalReport) -> Result<BTreeMap<String, String>> {
        let header = format!("# config {}\n", self.config_hash);
        let mut files = BTreeMap::new();
        let file = ReportFile {
            config_hash: self.config_hash.clone(),
            seeds: self.config.seeds.clone(),
            report: report.clone(),
        };
        files.insert("report.json".to_string(), to_json(&file)?);
        files.insert("report.tsv".to_string(), format!("{header}{}", report.to_tsv()));
        let mut gaps = String::from("protocol\tarm\tseed\tgap\n");
        for g in transfer_gap(report)? {
            for (s, v) in &g.per_seed {
                gaps.push_str(&format!("{}\t{}\t{s}\t{v:.6}\n", g.protocol, g.arm));
            }
            gaps.push_str(&format!("{}\t{}\tmean\t{:.6}\n", g.protocol, g.arm, g.mean));
        }
        files.insert("transfer_gap.tsv".to_string(), format!("{header}{gaps}"));
        for &layout in &self.config.report.layouts {
            let table = emit_comparison(report, layout, &self.config.report)?;
            files.insert(format!("{}.tsv", layout.name()), format!("{header}{table}"));
        }
        if self.config.report.trend {
            let summary = trend_check(report, &self.config.trend)?;
            let wrapped = json!({ "config_hash": self.config_hash, "trend": summary });
            files.insert("trend.json".to_string(), to_json(&wrapped)?);
        }
        Ok(files)
    }

    pub fn report_stage(&mut self, need: Need) -> Result<PathBuf> {
        let t = Instant::now();
        let report = self.collect_report(need)?;
        let files = self.render_report(&report)?;
        let dir = self.out.join("report");
        fs::create_dir_all(&dir).map_err(io_err(dir.display()))?;
        for (name, text) in &files {
            write(&dir.join(name), text)?;
            self.manifest.artifacts.insert(name.clone(), format!("report/{name}"));
        }
        let seconds = t.elapsed().as_secs_f64();
        let r = StageRecord {
            stage: "report".into(),
            label: "report".into(),
            key: self.config_hash[..16].to_string(),
            path: "report".into(),
            cache_hit: false,
            seconds,
        };
        self.session.push(r.clone());
        self.manifest.record(r);
        self.write_manifest()?;
        Ok(dir)
    }

    /// Every stage in order, computing whatever is missing.
    pub fn run_all(&mut self) -> Result<PathBuf> {
        self.gen_data()?;
        self.pretrain_stage(Need::Compute)?;
        self.finetune_stage(Need::Compute)?;
        self.evaluate_stage(Need::Compute)?;
        self.ablate_stage(None, Need::Compute)?;
        self.fewshot_stage(Need::Compute)?;
        self.report_stage(Need::Compute)
    }

    /// Rebuilds the report from the cached count files and checks that every
    /// emitted file matches byte for byte.
    pub fn audit(&mut self) -> Result<AuditSummary> {
        let report = self.collect_report(Need::Require)?;
        let on_disk: ReportFile = read_json(&self.out.join("report").join("report.json"))?;
        if on_disk.report != report {
            return Err(CoreError::Evaluation("report.json does not match the raw count files".into()));
        }
        let files = self.render_report(&report)?;
        let mut checked = Vec::new();
        for (name, text) in &files {
            let path = self.out.join("report").join(name);
            let disk = fs::read_to_string(&path).map_err(|_| CoreError::MissingArtifact(path.display().to_string()))?;
            if &disk != text {
                return Err(CoreError::Evaluation(format!("{name} differs from its re-derivation")));
            }
            checked.push(name.clone());
        }
        Ok(AuditSummary { cells_checked: report.rows().count(), files_checked: checked })
    }
}
