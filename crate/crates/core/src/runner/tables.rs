use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{Layout, ReportSection, TrendSpec};
use crate::diagnostics::{EvalReport, Protocol};
use crate::synthdata::QType;
use crate::{CoreError, Result};

/// Protocol label of few-shot results for `k` shots.
pub fn fewshot_protocol(k: usize) -> String {
    format!("fewshot-{k}")
}

fn parse_fewshot(p: &str) -> Option<usize> {
    p.strip_prefix("fewshot-")?.parse().ok()
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cell(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s)
}

fn seeds_of(report: &EvalReport, protocol: &str, arm: &str) -> Result<Vec<u64>> {
    let seeds = report.seeds(protocol, arm)?;
    if seeds.is_empty() {
        return Err(CoreError::Evaluation(format!("{protocol}/{arm}: no seeds")));
    }
    Ok(seeds)
}

fn per_seed(report: &EvalReport, protocol: &str, arm: &str, f: impl Fn(u64) -> Result<f64>) -> Result<Vec<f64>> {
    seeds_of(report, protocol, arm)?.into_iter().map(f).collect()
}

/// Renders one comparison layout as tab-separated text. Cells are accuracy
/// in percent, mean ± sample std over seeds; target averages exclude the
/// source language.
pub fn emit_comparison(report: &EvalReport, layout: Layout, opts: &ReportSection) -> Result<String> {
    match layout {
        Layout::Table1 => table1(report),
        Layout::Table2 => table2(report, &opts.table2_base, &opts.table2_sb),
        Layout::Table3 => table3(report),
        Layout::Fig2 => fig2(report),
    }
}

fn mm_arms(report: &EvalReport) -> Result<Vec<String>> {
    let arms: Vec<String> =
        report.cells.get(Protocol::Mm.name()).map(|a| a.keys().cloned().collect()).unwrap_or_default();
    if arms.is_empty() {
        return Err(CoreError::Evaluation("report has no MM results".into()));
    }
    Ok(arms)
}

fn table1(report: &EvalReport) -> Result<String> {
    let mm = Protocol::Mm.name();
    let arms = mm_arms(report)?;
    let targets = report.targets(mm, &arms[0])?;
    let mut out = format!("arm\t{}", report.source);
    for t in &targets {
        let _ = write!(out, "\t{t}");
    }
    out.push_str("\tAvg\n");
    for arm in &arms {
        if report.targets(mm, arm)? != targets {
            return Err(CoreError::Evaluation(format!("{arm}: language coverage differs")));
        }
        out.push_str(arm);
        for lang in std::iter::once(&report.source).chain(&targets) {
            let v = per_seed(report, mm, arm, |s| report.accuracy(mm, arm, lang, None, s))?;
            let _ = write!(out, "\t{}", cell(&v));
        }
        let v = per_seed(report, mm, arm, |s| report.target_mean(mm, arm, None, s))?;
        let _ = writeln!(out, "\t{}", cell(&v));
    }
    Ok(out)
}

fn table2(report: &EvalReport, base: &str, sb: &str) -> Result<String> {
    let columns: [(&str, Protocol, &str); 7] = [
        ("V-V", Protocol::VV, base),
        ("T-T", Protocol::TT, base),
        ("TG-TG", Protocol::TgTg, base),
        ("MM(Q)", Protocol::Mm, base),
        ("MM(Q+SB)", Protocol::Mm, sb),
        ("MM-V", Protocol::MmV, sb),
        ("MM-T", Protocol::MmT, sb),
    ];
    let mut out = String::from("qtype");
    for (name, _, _) in &columns {
        let _ = write!(out, "\t{name}");
    }
    out.push('\n');
    for q in QType::ALL {
        out.push_str(q.name());
        for (_, p, arm) in &columns {
            let v = per_seed(report, p.name(), arm, |s| report.target_mean(p.name(), arm, Some(q), s))?;
            let _ = write!(out, "\t{}", cell(&v));
        }
        out.push('\n');
    }
    Ok(out)
}

fn table3(report: &EvalReport) -> Result<String> {
    let mut shots: Vec<usize> = report.cells.keys().filter_map(|p| parse_fewshot(p)).collect();
    shots.sort_unstable();
    if shots.is_empty() {
        return Err(CoreError::Evaluation("report has no few-shot results".into()));
    }
    let arms = mm_arms(report)?;
    let mut out = String::from("shots");
    for a in &arms {
        let _ = write!(out, "\t{a}");
    }
    out.push('\n');
    // zero-shot row over the same target languages as the few-shot rows
    let fs0 = fewshot_protocol(shots[0]);
    out.push('0');
    for arm in &arms {
        let langs = report.languages(&fs0, arm)?;
        let v = per_seed(report, Protocol::Mm.name(), arm, |s| {
            let mut sum = 0.0;
            for l in &langs {
                sum += report.accuracy(Protocol::Mm.name(), arm, l, None, s)?;
            }
            Ok(sum / langs.len() as f64)
        })?;
        let _ = write!(out, "\t{}", cell(&v));
    }
    out.push('\n');
    for k in shots {
        let p = fewshot_protocol(k);
        let _ = write!(out, "{k}");
        for arm in &arms {
            let v = per_seed(report, &p, arm, |s| report.target_mean(&p, arm, None, s))?;
            let _ = write!(out, "\t{}", cell(&v));
        }
        out.push('\n');
    }
    Ok(out)
}

fn fig2(report: &EvalReport) -> Result<String> {
    let mm = Protocol::Mm.name();
    let arms = mm_arms(report)?;
    let mut out = String::from("qtype");
    for a in &arms {
        let _ = write!(out, "\t{a}:{}\t{a}:targets", report.source);
    }
    out.push('\n');
    for q in QType::ALL {
        out.push_str(q.name());
        for arm in &arms {
            let src = per_seed(report, mm, arm, |s| report.accuracy(mm, arm, &report.source, Some(q), s))?;
            let tgt = per_seed(report, mm, arm, |s| report.target_mean(mm, arm, Some(q), s))?;
            let _ = write!(out, "\t{}\t{}", cell(&src), cell(&tgt));
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrendStatus {
    Pass,
    /// Equal means; reported as a flag.
    Tie,
    Flag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub name: String,
    /// Arm expected to score at least as high.
    pub expected_higher: String,
    pub expected_lower: String,
    pub metric: String,
    pub higher: BTreeMap<u64, f64>,
    pub lower: BTreeMap<u64, f64>,
    pub mean_higher: f64,
    pub mean_lower: f64,
    pub status: TrendStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendSummary {
    pub seeds: Vec<u64>,
    pub hypotheses: Vec<Hypothesis>,
}

pub const MIN_TREND_SEEDS: usize = 5;

/// Directional comparisons on MM target-language means. Results are
/// informational: a flag never fails a run.
pub fn trend_check(report: &EvalReport, spec: &TrendSpec) -> Result<TrendSummary> {
    let mm = Protocol::Mm.name();
    let checks: [(&str, &str, &str, Option<QType>); 3] = [
        ("sb_vs_standard", &spec.sb, &spec.standard, None),
        ("deep_vs_linear", &spec.deep, &spec.linear, None),
        ("qtype_improves_choose", &spec.with_qtype, &spec.without_qtype, Some(QType::Choose)),
    ];
    let mut all_seeds: Vec<u64> = Vec::new();
    let mut hypotheses = Vec::new();
    for (name, hi, lo, q) in checks {
        let seeds: Vec<u64> = {
            let a = report.seeds(mm, hi)?;
            let b = report.seeds(mm, lo)?;
            a.into_iter().filter(|s| b.contains(s)).collect()
        };
        if seeds.len() < MIN_TREND_SEEDS {
            return Err(CoreError::Evaluation(format!(
                "trend check '{name}' needs at least {MIN_TREND_SEEDS} shared seeds, found {}",
                seeds.len()
            )));
        }
        let collect = |arm: &str| -> Result<BTreeMap<u64, f64>> {
            seeds.iter().map(|&s| Ok((s, report.target_mean(mm, arm, q, s)?))).collect()
        };
        let (higher, lower) = (collect(hi)?, collect(lo)?);
        let mean = |m: &BTreeMap<u64, f64>| m.values().sum::<f64>() / m.len() as f64;
        let (mh, ml) = (mean(&higher), mean(&lower));
        let status = if (mh - ml).abs() < 1e-12 {
            TrendStatus::Tie
        } else if mh > ml {
            TrendStatus::Pass
        } else {
            TrendStatus::Flag
        };
        all_seeds.extend(&seeds);
        hypotheses.push(Hypothesis {
            name: name.to_string(),
            expected_higher: hi.to_string(),
            expected_lower: lo.to_string(),
            metric: format!("MM target-language mean, {}", q.map_or("all qtypes", QType::name)),
            higher,
            lower,
            mean_higher: mh,
            mean_lower: ml,
            status,
        });
    }
    all_seeds.sort_unstable();
    all_seeds.dedup();
    Ok(TrendSummary { seeds: all_seeds, hypotheses })
}
