//! Exact and parametric match rates split into common and rare types, and
//! support-weighted precision/recall/F1 of the top-1 prediction.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::CanonicalType;
use crate::embed::DatapointKind;
use crate::typecluster::Prediction;

/// A type is common when the training set holds it more than this often.
pub const COMMON_THRESHOLD: usize = 100;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    EmptyEvaluation,
}

pub fn match_exact(pred: &CanonicalType, truth: &CanonicalType) -> bool {
    pred.canonical == truth.canonical
}

pub fn match_parametric(pred: &CanonicalType, truth: &CanonicalType) -> bool {
    pred.base == truth.base
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    Common,
    Rare,
}

pub fn stratify(train_counts: &BTreeMap<String, usize>, t: &CanonicalType) -> Stratum {
    match train_counts.get(&t.canonical) {
        Some(&c) if c > COMMON_THRESHOLD => Stratum::Common,
        _ => Stratum::Rare,
    }
}

/// Occurrences of each canonical type.
pub fn label_counts<'a>(labels: impl IntoIterator<Item = &'a CanonicalType>) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for l in labels {
        *out.entry(l.canonical.clone()).or_insert(0) += 1;
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Strata<T> {
    pub all: T,
    pub common: T,
    pub rare: T,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Weighted {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub counts: Strata<usize>,
    /// Percentages in `[0, 100]`; an empty stratum reports 0.
    pub exact: Strata<f64>,
    pub parametric: Strata<f64>,
    pub weighted: Weighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub top_n: usize,
    pub note: String,
    pub tasks: Vec<TaskReport>,
}

const NOTE: &str = "match rates count a hit anywhere in the top-n; weighted precision/recall/F1 use the top-1 prediction";

struct Item<'a> {
    ranked: &'a [(CanonicalType, f64)],
    truth: &'a CanonicalType,
    stratum: Stratum,
}

/// Scores predictions against ground truth. Items are split by datapoint
/// kind into argument and return tasks; items without a kind only count
/// towards the combined task.
pub fn evaluate(
    items: &[(Prediction, CanonicalType)],
    n: usize,
    train_counts: &BTreeMap<String, usize>,
    label: &str,
) -> Result<EvalReport, EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    let mut tasks = Vec::new();
    for (task, kind) in [
        ("argument", Some(DatapointKind::Argument)),
        ("return", Some(DatapointKind::Return)),
        ("combined", None),
    ] {
        let selected: Vec<Item> = items
            .iter()
            .filter(|(p, _)| kind.is_none() || p.kind == kind)
            .map(|(p, t)| Item {
                ranked: &p.ranked,
                truth: t,
                stratum: stratify(train_counts, t),
            })
            .collect();
        if !selected.is_empty() {
            tasks.push(score_task(task, &selected, n));
        }
    }
    Ok(EvalReport {
        label: label.to_string(),
        top_n: n,
        note: NOTE.to_string(),
        tasks,
    })
}

fn score_task(task: &str, items: &[Item], n: usize) -> TaskReport {
    let mut counts = Strata::<usize>::default();
    let mut exact = Strata::<usize>::default();
    let mut parametric = Strata::<usize>::default();
    for it in items {
        let top = &it.ranked[..n.min(it.ranked.len())];
        let e = top.iter().any(|(p, _)| match_exact(p, it.truth));
        let p = top.iter().any(|(p, _)| match_parametric(p, it.truth));
        for (bucket, hit) in [(&mut counts, true), (&mut exact, e), (&mut parametric, p)] {
            if hit {
                bucket.all += 1;
                match it.stratum {
                    Stratum::Common => bucket.common += 1,
                    Stratum::Rare => bucket.rare += 1,
                }
            }
        }
    }
    let pct = |hits: usize, total: usize| if total == 0 { 0.0 } else { 100.0 * hits as f64 / total as f64 };
    let rates = |h: Strata<usize>| Strata {
        all: pct(h.all, counts.all),
        common: pct(h.common, counts.common),
        rare: pct(h.rare, counts.rare),
    };
    TaskReport {
        task: task.to_string(),
        counts,
        exact: rates(exact),
        parametric: rates(parametric),
        weighted: weighted_scores(items),
    }
}

/// Per-class precision, recall and F1 of the top-1 assignment, averaged
/// with weights equal to each true class's support. Classes never
/// predicted have precision 0.
fn weighted_scores(items: &[Item]) -> Weighted {
    let mut support: BTreeMap<&str, usize> = BTreeMap::new();
    let mut predicted: BTreeMap<&str, usize> = BTreeMap::new();
    let mut correct: BTreeMap<&str, usize> = BTreeMap::new();
    for it in items {
        *support.entry(it.truth.canonical.as_str()).or_default() += 1;
        if let Some((p, _)) = it.ranked.first() {
            *predicted.entry(p.canonical.as_str()).or_default() += 1;
            if match_exact(p, it.truth) {
                *correct.entry(p.canonical.as_str()).or_default() += 1;
            }
        }
    }
    let total = items.len() as f64;
    let mut w = Weighted::default();
    for (class, &s) in &support {
        let tp = correct.get(class).copied().unwrap_or(0) as f64;
        let pc = predicted.get(class).copied().unwrap_or(0);
        let precision = if pc == 0 { 0.0 } else { tp / pc as f64 };
        let recall = tp / s as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        let weight = s as f64 / total;
        w.precision += weight * precision;
        w.recall += weight * recall;
        w.f1 += weight * f1;
    }
    w
}

impl EvalReport {
    /// Aligned text table: one row per task.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} (top-{})", self.label, self.top_n);
        let _ = writeln!(out, "note: {}", self.note);
        let _ = writeln!(
            out,
            "{:<10} {:>23} {:>23} {:>23} {:>7}",
            "", "% exact match", "% parametric match", "% weighted (top-1)", ""
        );
        let _ = writeln!(
            out,
            "{:<10} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "task", "all", "common", "rare", "all", "common", "rare", "prec", "recall", "f1", "n"
        );
        for t in &self.tasks {
            let _ = writeln!(
                out,
                "{:<10} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7}",
                t.task,
                t.exact.all,
                t.exact.common,
                t.exact.rare,
                t.parametric.all,
                t.parametric.common,
                t.parametric.rare,
                100.0 * t.weighted.precision,
                100.0 * t.weighted.recall,
                100.0 * t.weighted.f1,
                t.counts.all
            );
        }
        out
    }

    pub fn task(&self, name: &str) -> Option<&TaskReport> {
        self.tasks.iter().find(|t| t.task == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyReport {
    /// Types by descending count, ties by name.
    pub histogram: Vec<(String, usize)>,
    pub total: usize,
    pub distinct: usize,
    /// Share of all labels taken by the ten most frequent types, in percent.
    pub top10_share: f64,
}

pub fn type_frequency_report<'a>(labels: impl IntoIterator<Item = &'a CanonicalType>) -> FrequencyReport {
    let counts = label_counts(labels);
    let mut histogram: Vec<(String, usize)> = counts.into_iter().collect();
    histogram.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let total: usize = histogram.iter().map(|h| h.1).sum();
    let top: usize = histogram.iter().take(10).map(|h| h.1).sum();
    FrequencyReport {
        distinct: histogram.len(),
        top10_share: if total == 0 { 0.0 } else { 100.0 * top as f64 / total as f64 },
        histogram,
        total,
    }
}

impl FrequencyReport {
    pub fn render(&self, rows: usize) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} labels, {} distinct types, top-10 share {:.2}%",
            self.total, self.distinct, self.top10_share
        );
        let width = self.histogram.iter().take(rows).map(|h| h.0.len()).max().unwrap_or(4).max(4);
        for (t, c) in self.histogram.iter().take(rows) {
            let _ = writeln!(out, "{t:<width$} {c:>8}");
        }
        out
    }
}
