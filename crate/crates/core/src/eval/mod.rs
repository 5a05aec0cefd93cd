//! Detection metrics: precision/recall/F1 over instruction verdicts (with
//! incomplete ground truth), memory-block boundary sets, indirect-call recall
//! and AICT.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loader::GlobalRegion;
use crate::vsa::BoundarySet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truth {
    Pos,
    Neg,
    Pad,
    Unknown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub offset: usize,
    pub predicted: bool,
    pub truth: Truth,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricReport {
    /// P is 0 without predictions, R is 0 without positives, F1 is 0 when
    /// both are.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> MetricReport {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        MetricReport { tp, fp, fn_, precision, recall, f1 }
    }

    /// Sums the counts of several reports.
    pub fn merge<'a>(reports: impl IntoIterator<Item = &'a MetricReport>) -> MetricReport {
        let (tp, fp, fn_) = reports.into_iter().fold((0, 0, 0), |(a, b, c), r| (a + r.tp, b + r.fp, c + r.fn_));
        MetricReport::from_counts(tp, fp, fn_)
    }
}

/// Binary counts over positions whose truth is neither pad nor unknown.
pub fn prf1(verdicts: &[Verdict]) -> MetricReport {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for v in verdicts {
        match (v.predicted, v.truth) {
            (true, Truth::Pos) => tp += 1,
            (true, Truth::Neg) => fp += 1,
            (false, Truth::Pos) => fn_ += 1,
            _ => {}
        }
    }
    MetricReport::from_counts(tp, fp, fn_)
}

/// Verdicts for every predicted offset against a complete truth set.
pub fn verdicts(predicted: &BTreeMap<usize, bool>, truth: &BTreeSet<usize>, pad: &BTreeSet<usize>) -> Vec<Verdict> {
    predicted
        .iter()
        .map(|(&offset, &p)| {
            let truth = if pad.contains(&offset) {
                Truth::Pad
            } else if truth.contains(&offset) {
                Truth::Pos
            } else {
                Truth::Neg
            };
            Verdict { offset, predicted: p, truth }
        })
        .collect()
}

/// A decoded instruction and the model's verdict on its first byte.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredInstr {
    pub offset: usize,
    pub len: usize,
    pub verdict: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ByteSpan {
    pub offset: usize,
    pub len: usize,
}

impl ByteSpan {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Scoring against ground truth that only covers some of the code: the true
/// instructions observed at runtime, separated by unknown slots.
///
/// A predicted instruction whose bytes all lie in unknown slots is left out.
/// Every other prediction is scored on its first byte: a positive verdict on
/// the start of a true instruction is a TP, on any other byte an FP, and a
/// negative verdict on the start of a true instruction is an FN.
pub fn eval_incomplete(preds: &[PredInstr], truth: &[ByteSpan], unknown: &[ByteSpan]) -> MetricReport {
    let starts: BTreeSet<usize> = truth.iter().map(|s| s.offset).collect();
    let mut slots: Vec<Range<usize>> = unknown.iter().map(ByteSpan::range).filter(|r| !r.is_empty()).collect();
    slots.sort_by_key(|r| r.start);
    // Merge adjacent slots so a span crossing two of them counts as inside.
    let mut merged: Vec<Range<usize>> = Vec::new();
    for r in slots {
        match merged.last_mut() {
            Some(last) if r.start <= last.end => last.end = last.end.max(r.end),
            _ => merged.push(r),
        }
    }
    let inside_unknown = |p: &PredInstr| {
        let end = p.offset + p.len.max(1);
        merged.iter().any(|r| r.start <= p.offset && end <= r.end)
    };
    let verdicts: Vec<Verdict> = preds
        .iter()
        .filter(|p| !inside_unknown(p))
        .map(|p| Verdict {
            offset: p.offset,
            predicted: p.verdict,
            truth: if starts.contains(&p.offset) { Truth::Pos } else { Truth::Neg },
        })
        .collect();
    prf1(&verdicts)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    pub overall: MetricReport,
    pub global: MetricReport,
    pub stack: MetricReport,
}

fn pair_sets(b: &BoundarySet) -> (BTreeSet<(GlobalRegion, i64)>, BTreeSet<(String, i64)>) {
    let g = b.global.iter().flat_map(|(r, s)| s.iter().map(move |&o| (*r, o))).collect();
    let s = b.stack.iter().flat_map(|(f, s)| s.iter().map(move |&o| (f.clone(), o))).collect();
    (g, s)
}

fn set_report<T: Ord>(pred: &BTreeSet<T>, truth: &BTreeSet<T>) -> MetricReport {
    let tp = pred.intersection(truth).count();
    MetricReport::from_counts(tp, pred.len() - tp, truth.len() - tp)
}

/// Matches `(region, offset)` pairs exactly.
pub fn boundary_prf1(predicted: &BoundarySet, truth: &BoundarySet) -> BoundaryReport {
    let (pg, ps) = pair_sets(predicted);
    let (tg, ts) = pair_sets(truth);
    let global = set_report(&pg, &tg);
    let stack = set_report(&ps, &ts);
    BoundaryReport { overall: MetricReport::merge([&global, &stack]), global, stack }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("no call sites to average over")]
    EmptyCallsiteList,
}

impl EvalError {
    pub fn kind(&self) -> &'static str {
        "EmptyCallsiteList"
    }
}

/// Target sets per indirect call site.
pub type CallTargets = BTreeMap<u64, BTreeSet<u64>>;

/// Mean per-site recall of the observed targets. Sites with no observed
/// target are left out; a site missing from `predicted` predicts nothing.
pub fn recall_rc(predicted: &CallTargets, observed: &CallTargets) -> Result<f64, EvalError> {
    let empty = BTreeSet::new();
    let recalls: Vec<f64> = observed
        .iter()
        .filter(|(_, obs)| !obs.is_empty())
        .map(|(site, obs)| {
            let pred = predicted.get(site).unwrap_or(&empty);
            obs.intersection(pred).count() as f64 / obs.len() as f64
        })
        .collect();
    if recalls.is_empty() {
        return Err(EvalError::EmptyCallsiteList);
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Average number of predicted targets per indirect call site.
pub fn aict(predicted: &CallTargets) -> Result<f64, EvalError> {
    if predicted.is_empty() {
        return Err(EvalError::EmptyCallsiteList);
    }
    Ok(predicted.values().map(BTreeSet::len).sum::<usize>() as f64 / predicted.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub overall: MetricReport,
    pub binaries: BTreeMap<String, MetricReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundaryMetrics {
    pub overall: BoundaryReport,
    pub binaries: BTreeMap<String, BoundaryReport>,
}

/// Contents of `report.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub vocab_hash: String,
    pub tasks: BTreeMap<String, TaskMetrics>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub boundaries: Option<BoundaryMetrics>,
}

impl EvalReport {
    /// One row per task or boundary report, per binary and overall.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,binary,scope,tp,fp,fn,precision,recall,f1\n");
        let mut row = |metric: &str, binary: &str, scope: &str, r: &MetricReport| {
            let _ = writeln!(
                out,
                "{metric},{binary},{scope},{},{},{},{:.6},{:.6},{:.6}",
                r.tp, r.fp, r.fn_, r.precision, r.recall, r.f1
            );
        };
        for (task, m) in &self.tasks {
            for (b, r) in &m.binaries {
                row(task, b, "all", r);
            }
            row(task, "*", "all", &m.overall);
        }
        if let Some(bm) = &self.boundaries {
            let scopes = |b: &BoundaryReport| [("all", b.overall), ("global", b.global), ("stack", b.stack)];
            for (name, b) in &bm.binaries {
                for (scope, r) in scopes(b) {
                    row("boundaries", name, scope, &r);
                }
            }
            for (scope, r) in scopes(&bm.overall) {
                row("boundaries", "*", scope, &r);
            }
        }
        out
    }
}
