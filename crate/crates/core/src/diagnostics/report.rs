use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::Example;
use crate::synthdata::answers::NUM_CLASSES;
use crate::synthdata::QType;
use crate::{CoreError, Result};

/// Exact-match counts for one cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub correct: u64,
    pub total: u64,
}

impl Counts {
    pub fn accuracy(self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    fn add(&mut self, other: Counts) {
        self.correct += other.correct;
        self.total += other.total;
    }
}

/// Gold-answer histogram over the answer classes.
pub type AnswerHistogram = Vec<u64>;

/// Accuracy of always predicting the most frequent class of `hist`.
pub fn majority_rate(hist: &[u64]) -> f64 {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    *hist.iter().max().unwrap_or(&0) as f64 / total as f64
}

fn sum_hists<'a>(hists: impl IntoIterator<Item = &'a AnswerHistogram>) -> AnswerHistogram {
    let mut out = vec![0; NUM_CLASSES];
    for h in hists {
        for (o, v) in out.iter_mut().zip(h) {
            *o += v;
        }
    }
    out
}

/// Per-(language, qtype) counts of one model on one split, plus the split's
/// gold-answer histograms.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub cells: BTreeMap<String, BTreeMap<QType, Counts>>,
    pub answers: BTreeMap<String, BTreeMap<QType, AnswerHistogram>>,
}

impl AccuracyTable {
    pub fn language(&self, lang: &str) -> Option<Counts> {
        self.cells.get(lang).map(|m| {
            let mut c = Counts::default();
            m.values().for_each(|v| c.add(*v));
            c
        })
    }

    pub fn accuracy(&self, lang: &str) -> Option<f64> {
        self.language(lang).map(Counts::accuracy)
    }

    /// Majority-class accuracy over all of `lang`'s questions.
    pub fn majority(&self, lang: &str) -> Option<f64> {
        self.answers.get(lang).map(|m| majority_rate(&sum_hists(m.values())))
    }

    /// Mean accuracy over every language except `source`.
    pub fn target_mean(&self, source: &str) -> Result<f64> {
        let accs: Vec<f64> = self.cells.keys().filter(|l| *l != source).filter_map(|l| self.accuracy(l)).collect();
        if accs.is_empty() {
            return Err(CoreError::Evaluation("no target languages".into()));
        }
        Ok(accs.iter().sum::<f64>() / accs.len() as f64)
    }
}

/// Exact-match counts of `predictions` against the examples' gold answers.
pub fn score(examples: &[Example], predictions: &[usize]) -> Result<AccuracyTable> {
    if examples.len() != predictions.len() {
        return Err(CoreError::Evaluation(format!(
            "{} predictions for {} examples",
            predictions.len(),
            examples.len()
        )));
    }
    let mut table = AccuracyTable::default();
    for (e, &p) in examples.iter().zip(predictions) {
        if e.answer >= NUM_CLASSES {
            return Err(CoreError::Evaluation(format!("question {}: answer class {} out of range", e.qid, e.answer)));
        }
        let c = table.cells.entry(e.language.clone()).or_default().entry(e.qtype).or_default();
        c.total += 1;
        c.correct += (p == e.answer) as u64;
        let h =
            table.answers.entry(e.language.clone()).or_default().entry(e.qtype).or_insert_with(|| vec![0; NUM_CLASSES]);
        h[e.answer] += 1;
    }
    Ok(table)
}

/// protocol → arm → language → qtype → seed → counts.
pub type ReportCells = BTreeMap<String, BTreeMap<String, BTreeMap<String, BTreeMap<QType, BTreeMap<u64, Counts>>>>>;

/// Evaluation results across protocols, training arms (strategy, head and
/// conditioning variants), languages, question types and seeds.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub source: String,
    pub cells: ReportCells,
    /// Gold-answer histograms of the evaluated split.
    pub answers: BTreeMap<String, BTreeMap<QType, AnswerHistogram>>,
}

/// One flattened report cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRow<'a> {
    pub protocol: &'a str,
    pub arm: &'a str,
    pub language: &'a str,
    pub qtype: QType,
    pub seed: u64,
    pub counts: Counts,
}

impl EvalReport {
    pub fn new(source: &str) -> EvalReport {
        EvalReport { source: source.to_string(), ..EvalReport::default() }
    }

    /// Files `table` under (protocol, arm, seed). All tables of a report must
    /// come from the same split.
    pub fn insert(&mut self, protocol: &str, arm: &str, seed: u64, table: &AccuracyTable) -> Result<()> {
        self.merge_answers(&table.answers)?;
        let slot = self.cells.entry(protocol.to_string()).or_default().entry(arm.to_string()).or_default();
        for (lang, per_q) in &table.cells {
            for (q, c) in per_q {
                slot.entry(lang.clone()).or_default().entry(*q).or_default().insert(seed, *c);
            }
        }
        Ok(())
    }

    fn merge_answers(&mut self, answers: &BTreeMap<String, BTreeMap<QType, AnswerHistogram>>) -> Result<()> {
        for (lang, per_q) in answers {
            for (q, h) in per_q {
                let mine = self.answers.entry(lang.clone()).or_default();
                match mine.get(q) {
                    Some(existing) if existing != h => {
                        return Err(CoreError::Evaluation(format!(
                            "answer histogram mismatch for {lang}/{q}: tables come from different splits"
                        )))
                    }
                    Some(_) => {}
                    None => {
                        mine.insert(*q, h.clone());
                    }
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &EvalReport) -> Result<()> {
        if !self.source.is_empty() && self.source != other.source {
            return Err(CoreError::Evaluation(format!("source {} vs {}", self.source, other.source)));
        }
        self.source = other.source.clone();
        self.merge_answers(&other.answers)?;
        for row in other.rows() {
            self.cells
                .entry(row.protocol.to_string())
                .or_default()
                .entry(row.arm.to_string())
                .or_default()
                .entry(row.language.to_string())
                .or_default()
                .entry(row.qtype)
                .or_default()
                .insert(row.seed, row.counts);
        }
        Ok(())
    }

    pub fn rows(&self) -> impl Iterator<Item = CellRow<'_>> {
        self.cells.iter().flat_map(|(p, arms)| {
            arms.iter().flat_map(move |(a, langs)| {
                langs.iter().flat_map(move |(l, qs)| {
                    qs.iter().flat_map(move |(q, seeds)| {
                        seeds.iter().map(move |(s, c)| CellRow {
                            protocol: p,
                            arm: a,
                            language: l,
                            qtype: *q,
                            seed: *s,
                            counts: *c,
                        })
                    })
                })
            })
        })
    }

    fn arm(&self, protocol: &str, arm: &str) -> Result<&BTreeMap<String, BTreeMap<QType, BTreeMap<u64, Counts>>>> {
        self.cells
            .get(protocol)
            .and_then(|a| a.get(arm))
            .ok_or_else(|| CoreError::Evaluation(format!("report has no {protocol}/{arm} cells")))
    }

    pub fn seeds(&self, protocol: &str, arm: &str) -> Result<Vec<u64>> {
        let mut seeds: Vec<u64> =
            self.arm(protocol, arm)?.values().flat_map(|qs| qs.values().flat_map(|s| s.keys().copied())).collect();
        seeds.sort_unstable();
        seeds.dedup();
        Ok(seeds)
    }

    pub fn languages(&self, protocol: &str, arm: &str) -> Result<Vec<String>> {
        Ok(self.arm(protocol, arm)?.keys().cloned().collect())
    }

    /// Counts summed over the qtypes in `qtypes` (all when `None`).
    pub fn counts(&self, protocol: &str, arm: &str, lang: &str, qtype: Option<QType>, seed: u64) -> Result<Counts> {
        let per_q = self
            .arm(protocol, arm)?
            .get(lang)
            .ok_or_else(|| CoreError::Evaluation(format!("report has no {protocol}/{arm}/{lang} cells")))?;
        let mut c = Counts::default();
        let mut found = false;
        for (q, seeds) in per_q {
            if qtype.is_none_or(|t| t == *q) {
                if let Some(v) = seeds.get(&seed) {
                    c.add(*v);
                    found = true;
                }
            }
        }
        if !found {
            return Err(CoreError::Evaluation(format!("no cell {protocol}/{arm}/{lang}/{qtype:?}/seed {seed}")));
        }
        Ok(c)
    }

    pub fn accuracy(&self, protocol: &str, arm: &str, lang: &str, qtype: Option<QType>, seed: u64) -> Result<f64> {
        self.counts(protocol, arm, lang, qtype, seed).map(Counts::accuracy)
    }

    pub fn targets(&self, protocol: &str, arm: &str) -> Result<Vec<String>> {
        Ok(self.languages(protocol, arm)?.into_iter().filter(|l| *l != self.source).collect())
    }

    /// Mean accuracy over target languages (source excluded) for one seed.
    pub fn target_mean(&self, protocol: &str, arm: &str, qtype: Option<QType>, seed: u64) -> Result<f64> {
        let targets = self.targets(protocol, arm)?;
        if targets.is_empty() {
            return Err(CoreError::Evaluation(format!("{protocol}/{arm}: no target languages")));
        }
        let mut sum = 0.0;
        for l in &targets {
            sum += self.accuracy(protocol, arm, l, qtype, seed)?;
        }
        Ok(sum / targets.len() as f64)
    }

    /// Majority-class accuracy for `lang` restricted to `qtype` (all when `None`).
    pub fn majority(&self, lang: &str, qtype: Option<QType>) -> f64 {
        self.answers
            .get(lang)
            .map(|m| {
                majority_rate(&sum_hists(m.iter().filter(|(q, _)| qtype.is_none_or(|t| t == **q)).map(|(_, h)| h)))
            })
            .unwrap_or(0.0)
    }

    /// Every numerator within its denominator, and every denominator equal to
    /// the split's question count for that (language, qtype).
    pub fn check_integrity(&self) -> Result<()> {
        for r in self.rows() {
            if r.counts.correct > r.counts.total {
                return Err(CoreError::Evaluation(format!("{r:?}: correct exceeds total")));
            }
            let expected: u64 =
                self.answers.get(r.language).and_then(|m| m.get(&r.qtype)).map(|h| h.iter().sum()).unwrap_or(0);
            if r.counts.total != expected {
                return Err(CoreError::Evaluation(format!("{r:?}: total differs from split count {expected}")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| CoreError::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<EvalReport> {
        serde_json::from_str(text).map_err(|e| CoreError::Serde(e.to_string()))
    }

    /// One row per cell, with the cell's majority-class baseline.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("protocol\tarm\tlanguage\tqtype\tseed\tcorrect\ttotal\taccuracy\tmajority\n");
        for r in self.rows() {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}",
                r.protocol,
                r.arm,
                r.language,
                r.qtype,
                r.seed,
                r.counts.correct,
                r.counts.total,
                r.counts.accuracy(),
                self.majority(r.language, Some(r.qtype))
            );
        }
        out
    }
}

/// Source-minus-target-mean accuracy of one (protocol, arm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub protocol: String,
    pub arm: String,
    pub per_seed: BTreeMap<u64, f64>,
    pub mean: f64,
}

/// Transfer gap `acc(source) − mean(targets)` for every (protocol, arm),
/// per seed and averaged over seeds. Rows without source-language results
/// (few-shot evaluations) are skipped.
pub fn transfer_gap(report: &EvalReport) -> Result<Vec<GapRow>> {
    let mut rows = Vec::new();
    for (p, arms) in &report.cells {
        for a in arms.keys() {
            if !report.languages(p, a)?.contains(&report.source) {
                continue;
            }
            let mut per_seed = BTreeMap::new();
            for s in report.seeds(p, a)? {
                let src = report.accuracy(p, a, &report.source, None, s)?;
                per_seed.insert(s, src - report.target_mean(p, a, None, s)?);
            }
            let mean = per_seed.values().sum::<f64>() / per_seed.len() as f64;
            rows.push(GapRow { protocol: p.clone(), arm: a.clone(), per_seed, mean });
        }
    }
    Ok(rows)
}
