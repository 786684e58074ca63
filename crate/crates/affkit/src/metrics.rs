//! Competition-style scoring: per-class F1 over confusion matrices,
//! concordance correlation as a metric, and the aggregate task scores.
//!
//! The multi-task score is `P_MTL = (ccc_v + ccc_a)/2 + sum(F1_expr)/8 +
//! sum(F1_au)/12`, each term computed on the subset of samples actually
//! labeled for that task. The synthetic-data score is the macro F1 over the
//! six basic expressions. Macro denominators stay fixed even when a class
//! never occurs; absent classes contribute zero.
//!
//! Everything here is evaluated in f64 without gradient tracking.

use crate::data::{SampleRecord, TaskKind, AU_NAMES, LSD_CLASSES, MTL_CLASSES, NUM_AUS};
use crate::error::{Error, Result};
use crate::losses::CCC_DELTA;
use std::fmt::Write as _;

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::invalid("confusion matrix needs at least one class"));
        }
        Ok(ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        })
    }

    pub fn from_pairs(labels: &[usize], preds: &[usize], classes: usize) -> Result<Self> {
        if labels.len() != preds.len() {
            return Err(Error::invalid(format!(
                "confusion: {} labels vs {} predictions",
                labels.len(),
                preds.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(classes)?;
        for (&t, &p) in labels.iter().zip(preds) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::invalid(format!(
                "confusion: class index out of range ({truth},{pred}) with {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Merges another matrix of the same arity (partitioned evaluation).
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::invalid("confusion: merging different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class F1 with the 0/0 -> 0 convention, plus the unweighted macro
    /// mean over all classes.
    pub fn f1_scores(&self) -> (Vec<f64>, f64) {
        let c = self.classes;
        let mut per_class = Vec::with_capacity(c);
        for i in 0..c {
            let tp = self.count(i, i) as f64;
            let fp: f64 = (0..c).filter(|&t| t != i).map(|t| self.count(t, i) as f64).sum();
            let fn_: f64 = (0..c).filter(|&p| p != i).map(|p| self.count(i, p) as f64).sum();
            per_class.push(f1_from_counts(tp, fp, fn_));
        }
        let macro_f1 = macro_average(&per_class);
        (per_class, macro_f1)
    }
}

fn f1_from_counts(tp: f64, fp: f64, fn_: f64) -> f64 {
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Unweighted mean; the fixed-denominator aggregation used everywhere here.
pub fn macro_average(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// F1 of the positive class of a binary task; 0/0 -> 0.
pub fn binary_f1(labels: &[u8], preds: &[u8]) -> Result<f64> {
    if labels.len() != preds.len() {
        return Err(Error::invalid(format!(
            "binary_f1: {} labels vs {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    if labels.iter().chain(preds).any(|&v| v > 1) {
        return Err(Error::invalid("binary_f1: values must be 0 or 1"));
    }
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    for (&t, &p) in labels.iter().zip(preds) {
        match (t, p) {
            (1, 1) => tp += 1.0,
            (0, 1) => fp += 1.0,
            (1, 0) => fn_ += 1.0,
            _ => {}
        }
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

/// Concordance correlation coefficient in f64, same formula and stabilizer
/// as the differentiable loss-side version.
pub fn ccc_metric(pred: &[f64], truth: &[f64]) -> Result<f64> {
    let n = pred.len();
    if n < 2 || truth.len() != n {
        return Err(Error::invalid(format!(
            "ccc_metric: need two equal-length sequences of >= 2, got {} and {}",
            n,
            truth.len()
        )));
    }
    let nf = n as f64;
    let mean_p = pred.iter().sum::<f64>() / nf;
    let mean_t = truth.iter().sum::<f64>() / nf;
    let mut cov = 0.0;
    let mut var_p = 0.0;
    let mut var_t = 0.0;
    for (&p, &t) in pred.iter().zip(truth) {
        cov += (p - mean_p) * (t - mean_t);
        var_p += (p - mean_p) * (p - mean_p);
        var_t += (t - mean_t) * (t - mean_t);
    }
    cov /= nf;
    var_p /= nf;
    var_t /= nf;
    let diff = mean_p - mean_t;
    Ok(2.0 * cov / (var_p + var_t + diff * diff + CCC_DELTA))
}

/// Predictions for one sample across all three task heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MtlPrediction {
    pub expression: usize,
    pub valence: f32,
    pub arousal: f32,
    pub aus: [u8; NUM_AUS],
}

/// Per-task scores plus the per-class breakdowns behind them.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub task: TaskKind,
    pub p_va: f64,
    pub p_expr: f64,
    pub p_au: f64,
    /// `P_MTL` for the multi-task report, macro F1 for the synthetic-data one.
    pub overall: f64,
    pub ccc_v: f64,
    pub ccc_a: f64,
    pub per_class_f1: Vec<(String, f64)>,
    pub per_au_f1: Vec<(String, f64)>,
    pub scored_va: usize,
    pub scored_expr: usize,
    /// Samples with at least one labeled action unit.
    pub scored_au: usize,
    /// Tasks that had zero scoreable samples and were reported as 0.
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn p_mtl(&self) -> f64 {
        self.overall
    }

    /// Key-value text rendering with stable field order, 6 decimals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task={}", self.task);
        match self.task {
            TaskKind::Mtl => {
                let _ = writeln!(s, "p_mtl={:.6}", self.overall);
                let _ = writeln!(s, "p_va={:.6}", self.p_va);
                let _ = writeln!(s, "p_expr={:.6}", self.p_expr);
                let _ = writeln!(s, "p_au={:.6}", self.p_au);
                let _ = writeln!(s, "ccc_v={:.6}", self.ccc_v);
                let _ = writeln!(s, "ccc_a={:.6}", self.ccc_a);
            }
            TaskKind::Lsd => {
                let _ = writeln!(s, "p_lsd={:.6}", self.overall);
            }
        }
        for (name, f1) in &self.per_class_f1 {
            let _ = writeln!(s, "f1_expr_{name}={f1:.6}");
        }
        for (name, f1) in &self.per_au_f1 {
            let _ = writeln!(s, "f1_{name}={f1:.6}");
        }
        let _ = writeln!(s, "scored_expr={}", self.scored_expr);
        if self.task == TaskKind::Mtl {
            let _ = writeln!(s, "scored_va={}", self.scored_va);
            let _ = writeln!(s, "scored_au={}", self.scored_au);
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning={w}");
        }
        s
    }
}

/// The Eq. 5 aggregation.
pub fn mtl_aggregate(p_va: f64, p_expr: f64, p_au: f64) -> f64 {
    p_va + p_expr + p_au
}

/// Scores multi-task predictions against their records. Each task is
/// evaluated only on the samples labeled for it: valence/arousal where both
/// are valid, expression where not the -1 sentinel, and each action unit
/// column independently where not -1. A task with zero scoreable samples
/// scores 0 and adds a warning.
pub fn evaluate_mtl(records: &[SampleRecord], preds: &[MtlPrediction]) -> Result<MetricReport> {
    if records.len() != preds.len() {
        return Err(Error::invalid(format!(
            "evaluate_mtl: {} records vs {} predictions",
            records.len(),
            preds.len()
        )));
    }
    let mut warnings = Vec::new();

    // Valence / arousal.
    let mut pv = Vec::new();
    let mut tv = Vec::new();
    let mut pa = Vec::new();
    let mut ta = Vec::new();
    for (r, p) in records.iter().zip(preds) {
        if r.has_va() {
            pv.push(p.valence as f64);
            tv.push(r.valence as f64);
            pa.push(p.arousal as f64);
            ta.push(r.arousal as f64);
        }
    }
    let scored_va = pv.len();
    let (ccc_v, ccc_a) = if scored_va >= 2 {
        (ccc_metric(&pv, &tv)?, ccc_metric(&pa, &ta)?)
    } else {
        warnings.push("no valence/arousal labels; p_va reported as 0".to_string());
        (0.0, 0.0)
    };
    let p_va = (ccc_v + ccc_a) / 2.0;

    // Expression.
    let mut cm = ConfusionMatrix::new(MTL_CLASSES.len())?;
    let mut scored_expr = 0;
    for (r, p) in records.iter().zip(preds) {
        if let Some(label) = r.expression_label() {
            cm.record(label, p.expression)?;
            scored_expr += 1;
        }
    }
    if scored_expr == 0 {
        warnings.push("no expression labels; p_expr reported as 0".to_string());
    }
    let (expr_f1, _) = cm.f1_scores();
    let p_expr = expr_f1.iter().sum::<f64>() / MTL_CLASSES.len() as f64;

    // Action units, each column on its own labeled subset.
    let mut per_au_f1 = Vec::with_capacity(NUM_AUS);
    let mut scored_any_au = 0;
    for r in records {
        if r.aus.iter().any(|&v| v >= 0) {
            scored_any_au += 1;
        }
    }
    for (i, name) in AU_NAMES.iter().enumerate() {
        let mut labels = Vec::new();
        let mut predicted = Vec::new();
        for (r, p) in records.iter().zip(preds) {
            if r.aus[i] >= 0 {
                labels.push(r.aus[i] as u8);
                predicted.push(p.aus[i]);
            }
        }
        let f1 = if labels.is_empty() {
            0.0
        } else {
            binary_f1(&labels, &predicted)?
        };
        per_au_f1.push((name.to_string(), f1));
    }
    if scored_any_au == 0 {
        warnings.push("no action-unit labels; p_au reported as 0".to_string());
    }
    let p_au = per_au_f1.iter().map(|(_, f)| f).sum::<f64>() / NUM_AUS as f64;

    Ok(MetricReport {
        task: TaskKind::Mtl,
        p_va,
        p_expr,
        p_au,
        overall: mtl_aggregate(p_va, p_expr, p_au),
        ccc_v,
        ccc_a,
        per_class_f1: MTL_CLASSES
            .iter()
            .map(|n| n.to_string())
            .zip(expr_f1)
            .collect(),
        per_au_f1,
        scored_va,
        scored_expr,
        scored_au: scored_any_au,
        warnings,
    })
}

/// Macro F1 over the six basic expressions, fixed class order.
pub fn evaluate_lsd(labels: &[usize], preds: &[usize]) -> Result<MetricReport> {
    let cm = ConfusionMatrix::from_pairs(labels, preds, LSD_CLASSES.len())?;
    let (per_class, macro_f1) = cm.f1_scores();
    Ok(MetricReport {
        task: TaskKind::Lsd,
        p_va: 0.0,
        p_expr: macro_f1,
        p_au: 0.0,
        overall: macro_f1,
        ccc_v: 0.0,
        ccc_a: 0.0,
        per_class_f1: LSD_CLASSES
            .iter()
            .map(|n| n.to_string())
            .zip(per_class)
            .collect(),
        per_au_f1: Vec::new(),
        scored_va: 0,
        scored_expr: labels.len(),
        scored_au: 0,
        warnings: Vec::new(),
    })
}
