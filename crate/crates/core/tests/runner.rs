use std::fs;
use std::path::Path;

use xvqa_core::diagnostics::{score, EvalReport, Protocol};
use xvqa_core::runner::*;
use xvqa_core::synthdata::*;
use xvqa_core::training::examples_for;
use xvqa_core::CoreError;

const TINY: &str = r#"
seeds = [0, 1]
pretrain_seed = 3

[data]
pretrain_scenes = 24
train_scenes = 10
dev_scenes = 4
test_scenes = 6

[model]
d_model = 16
layers = 1
heads = 2
ffn_dim = 32
head_hidden = 16

[pretrain]
epochs = 1

[finetune]
total_epochs = 3
stage1_epochs = 2
stage2_epochs = 1
batch_size = 16

[[arms]]
strategy = "sb"

[evaluate]
protocols = ["MM", "MM-V", "MM-T", "V-V", "T-T", "TG-TG"]

[fewshot]
shots = [1]
languages = ["t1"]

[fewshot.train]
epochs = 1

[report]
layouts = ["table1", "table2", "table3", "fig2"]
table2_base = "sb-deep"
table2_sb = "sb-deep"
"#;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(TINY).unwrap()
}

fn report_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir.join("report"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn config_errors_name_the_problem() {
    let err = ExperimentConfig::from_toml("seeds = [1]\nlearning_rate = 3").unwrap_err();
    assert!(matches!(&err, CoreError::Config(m) if m.contains("learning_rate")), "{err}");
    let err = ExperimentConfig::from_toml("[model]\nwidth = 3").unwrap_err();
    assert!(err.to_string().contains("width"), "{err}");
    assert!(ExperimentConfig::from_toml("seeds = []").is_err());
    assert!(ExperimentConfig::from_toml("seeds = [1, 1]").is_err());
    assert!(ExperimentConfig::from_toml("arms = []").is_err());
    let twice = "[[arms]]\nstrategy = \"ft\"\n[[arms]]\nstrategy = \"ft\"\n";
    assert!(ExperimentConfig::from_toml(twice).is_err());
    let bad_budget = "[finetune]\ntotal_epochs = 7\n[[arms]]\nstrategy = \"ft_long\"\n";
    assert!(ExperimentConfig::from_toml(bad_budget).is_err());
}

#[test]
fn config_roundtrips_and_hash_ignores_output_dir() {
    let cfg = tiny();
    let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(back, cfg);
    let moved = ExperimentConfig { output_dir: "elsewhere".into(), ..cfg.clone() };
    assert_eq!(moved.hash(), cfg.hash());
    let reseeded = ExperimentConfig { seeds: vec![0, 2], ..cfg.clone() };
    assert_ne!(reseeded.hash(), cfg.hash());
}

#[test]
fn shipped_configs_parse() {
    for name in ["default.toml", "reference.toml", "tables.toml"] {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
        ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn downstream_stage_without_upstream_fails() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = Runner::new(tiny(), dir.path()).unwrap();
    let err = r.report_stage(Need::Require).unwrap_err();
    assert!(matches!(err, CoreError::MissingArtifact(_)), "{err}");
    let err = r.finetune_stage(Need::ComputeOwn).unwrap_err();
    assert!(matches!(err, CoreError::MissingArtifact(_)), "{err}");
}

#[test]
fn pipeline_caches_audits_and_is_byte_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    Runner::new(tiny(), a.path()).unwrap().run_all().unwrap();

    // staged commands on a fresh directory, seeds on parallel workers, reach
    // the same bytes
    let mut r = Runner::new(tiny(), b.path()).unwrap().with_threads(2);
    r.gen_data().unwrap();
    r.pretrain_stage(Need::ComputeOwn).unwrap();
    r.finetune_stage(Need::ComputeOwn).unwrap();
    r.evaluate_stage(Need::ComputeOwn).unwrap();
    r.ablate_stage(None, Need::ComputeOwn).unwrap();
    r.fewshot_stage(Need::ComputeOwn).unwrap();
    r.report_stage(Need::Require).unwrap();
    assert_eq!(report_files(a.path()), report_files(b.path()));
    let names: Vec<String> = report_files(a.path()).into_iter().map(|(n, _)| n).collect();
    for expected in
        ["report.json", "report.tsv", "transfer_gap.tsv", "table1.tsv", "table2.tsv", "table3.tsv", "fig2.tsv"]
    {
        assert!(names.iter().any(|n| n == expected), "missing {expected}");
    }

    // second run: every stage it touches is a cache hit
    let mut again = Runner::new(tiny(), a.path()).unwrap();
    let before = report_files(a.path());
    again.run_all().unwrap();
    let m = RunManifest::load(&a.path().join("manifest.json")).unwrap();
    assert_eq!(m.config_hash, again.config_hash());
    let touched: Vec<&StageRecord> = again.session().iter().filter(|s| s.stage != "report").collect();
    assert!(!touched.is_empty());
    assert!(touched.iter().all(|s| s.cache_hit && s.seconds == 0.0));
    assert!(touched.iter().any(|s| s.stage == "eval"));
    assert_eq!(before, report_files(a.path()));

    // audit re-derives every file, and notices tampering
    let summary = again.audit().unwrap();
    assert!(summary.cells_checked > 0);
    assert!(summary.files_checked.iter().any(|f| f == "table1.tsv"));
    let tsv = a.path().join("report/table1.tsv");
    let text = fs::read_to_string(&tsv).unwrap();
    fs::write(&tsv, text.replacen('.', ",", 1)).unwrap();
    assert!(again.audit().is_err());

    // a different seed list is a different config
    let other = Runner::new(ExperimentConfig { seeds: vec![5], ..tiny() }, a.path()).unwrap();
    assert_ne!(other.config_hash(), again.config_hash());
}

fn small_dataset() -> Dataset {
    let cfg =
        DataConfig { pretrain_scenes: 10, train_scenes: 4, dev_scenes: 2, test_scenes: 8, ..DataConfig::default() };
    build_corpus_and_splits(&cfg).unwrap()
}

/// Report with arms scoring `oracle` on a fraction of questions set per arm/seed.
fn synthetic(ds: &Dataset, arms: &[(&str, f64)], seeds: &[u64]) -> EvalReport {
    let mut report = EvalReport::new(SOURCE);
    for &(arm, frac) in arms {
        for &seed in seeds {
            let mut cells = xvqa_core::diagnostics::AccuracyTable::default();
            for lang in ds.vocab.language_names() {
                let ex = examples_for(ds, Split::Test, &lang).unwrap();
                let cut = (frac * ex.len() as f64).round() as usize;
                let preds: Vec<usize> =
                    ex.iter().enumerate().map(|(i, e)| if i < cut { e.answer } else { (e.answer + 1) % 20 }).collect();
                let t = score(&ex, &preds).unwrap();
                cells.cells.extend(t.cells);
                cells.answers.extend(t.answers);
            }
            report.insert(Protocol::Mm.name(), arm, seed, &cells).unwrap();
        }
    }
    report
}

#[test]
fn table_layouts() {
    let ds = small_dataset();
    let report = synthetic(&ds, &[("a", 1.0), ("b", 0.0)], &[0, 1]);
    let opts = ReportSection::default();
    let t1 = emit_comparison(&report, Layout::Table1, &opts).unwrap();
    let lines: Vec<&str> = t1.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("arm\tsrc\tt1"));
    assert!(lines[0].ends_with("\tAvg"));
    assert!(lines[1].starts_with("a\t100.00 ± 0.00"));
    assert!(lines[2].starts_with("b\t0.00 ± 0.00"));
    let fig = emit_comparison(&report, Layout::Fig2, &opts).unwrap();
    assert_eq!(fig.lines().count(), 1 + QType::ALL.len());
    // layouts needing protocols or arms that are absent refuse to render
    assert!(emit_comparison(&report, Layout::Table2, &opts).is_err());
    assert!(emit_comparison(&report, Layout::Table3, &opts).is_err());
    assert!(emit_comparison(&EvalReport::new(SOURCE), Layout::Table1, &opts).is_err());
}

#[test]
fn mean_std_matches_hand_values() {
    assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
    assert!((m - 2.5).abs() < 1e-15);
    // sample variance of 1..4 is 5/3
    assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
}

#[test]
fn trend_check_statuses() {
    let ds = small_dataset();
    let spec = TrendSpec::default();
    let seeds = [0, 1, 2, 3, 4];
    let arms = [("sb-deep", 0.8), ("standard-deep", 0.5), ("standard-linear", 0.6), ("standard-deep-q", 0.5)];
    let summary = trend_check(&synthetic(&ds, &arms, &seeds), &spec).unwrap();
    assert_eq!(summary.seeds, seeds.to_vec());
    let status: Vec<(String, TrendStatus)> = summary.hypotheses.iter().map(|h| (h.name.clone(), h.status)).collect();
    assert_eq!(
        status,
        vec![
            ("sb_vs_standard".to_string(), TrendStatus::Pass),
            ("deep_vs_linear".to_string(), TrendStatus::Flag),
            ("qtype_improves_choose".to_string(), TrendStatus::Tie),
        ]
    );
    let h = &summary.hypotheses[0];
    assert_eq!(h.higher.len(), 5);
    assert!(h.mean_higher > h.mean_lower);
    // four seeds are not enough
    assert!(trend_check(&synthetic(&ds, &arms, &seeds[..4]), &spec).is_err());
}
