//! Confusion matrix and the evaluation aggregates: per-class
//! precision/recall/F1, weighted F1, micro F1, macro F1, and micro F1 with
//! the neutral class excluded from pooling.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `counts[true][pred]`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Empty("confusion matrix needs at least one class".into()));
        }
        Ok(ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        })
    }

    pub fn get(&self, true_class: usize, pred_class: usize) -> u64 {
        self.counts[true_class * self.num_classes + pred_class]
    }

    pub fn record(&mut self, true_class: usize, pred_class: usize) {
        self.counts[true_class * self.num_classes + pred_class] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Row sum: how many samples truly belong to the class.
    pub fn support(&self, class: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(class, p)).sum()
    }

    fn predicted(&self, class: usize) -> u64 {
        (0..self.num_classes).map(|t| self.get(t, class)).sum()
    }
}

pub fn confusion_matrix(true_labels: &[usize], pred_labels: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if true_labels.len() != pred_labels.len() {
        return Err(Error::ShapeMismatch {
            op: "confusion_matrix",
            lhs: vec![true_labels.len()],
            rhs: vec![pred_labels.len()],
        });
    }
    let mut cm = ConfusionMatrix::new(num_classes)?;
    for (&t, &p) in true_labels.iter().zip(pred_labels) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::Label(format!(
                "label pair ({t}, {p}) outside [0, {num_classes})"
            )));
        }
        cm.record(t, p);
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision, recall, and F1 with the 0/0 -> 0 convention.
pub fn f1_scores(cm: &ConfusionMatrix) -> Vec<ClassScores> {
    (0..cm.num_classes)
        .map(|c| {
            let tp = cm.get(c, c);
            let precision = ratio(tp, cm.predicted(c));
            let recall = ratio(tp, cm.support(c));
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                precision,
                recall,
                f1,
                support: cm.support(c),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Average {
    Weighted,
    Micro,
    Macro,
}

/// Aggregate F1. Excluded classes drop out of averaging entirely; for micro
/// pooling, a prediction of an excluded class on a kept gold label still
/// counts as the kept class's false negative, and a kept prediction on an
/// excluded gold label counts as its false positive.
pub fn aggregate(cm: &ConfusionMatrix, mode: Average, exclude: &BTreeSet<usize>) -> Result<f64> {
    let kept: Vec<usize> = (0..cm.num_classes).filter(|c| !exclude.contains(c)).collect();
    if kept.is_empty() {
        return Err(Error::Empty("every class excluded from aggregation".into()));
    }
    let scores = f1_scores(cm);
    match mode {
        Average::Weighted => {
            let total: u64 = kept.iter().map(|&c| scores[c].support).sum();
            if total == 0 {
                return Ok(0.0);
            }
            Ok(kept
                .iter()
                .map(|&c| scores[c].support as f64 * scores[c].f1)
                .sum::<f64>()
                / total as f64)
        }
        Average::Macro => {
            Ok(kept.iter().map(|&c| scores[c].f1).sum::<f64>() / kept.len() as f64)
        }
        Average::Micro => {
            let mut tp = 0u64;
            let mut fp = 0u64;
            let mut fne = 0u64;
            for &c in &kept {
                tp += cm.get(c, c);
                fp += cm.predicted(c) - cm.get(c, c);
                fne += cm.support(c) - cm.get(c, c);
            }
            let den = 2 * tp + fp + fne;
            Ok(ratio(2 * tp, den))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub label_names: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassScores>,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub micro_f1_excl_neutral: Option<f64>,
}

/// Full report from gold/predicted labels. `neutral_index` switches on the
/// excluded-micro aggregate.
pub fn report(
    true_labels: &[usize],
    pred_labels: &[usize],
    label_names: &[String],
    neutral_index: Option<usize>,
) -> Result<MetricsReport> {
    let k = label_names.len();
    let cm = confusion_matrix(true_labels, pred_labels, k)?;
    let per_class = f1_scores(&cm);
    let none = BTreeSet::new();
    let micro_f1 = aggregate(&cm, Average::Micro, &none)?;
    let micro_f1_excl_neutral = match neutral_index {
        Some(n) => {
            let mut ex = BTreeSet::new();
            ex.insert(n);
            Some(aggregate(&cm, Average::Micro, &ex)?)
        }
        None => None,
    };
    let correct: u64 = (0..k).map(|c| cm.get(c, c)).sum();
    Ok(MetricsReport {
        label_names: label_names.to_vec(),
        accuracy: ratio(correct, cm.total()),
        weighted_f1: aggregate(&cm, Average::Weighted, &none)?,
        macro_f1: aggregate(&cm, Average::Macro, &none)?,
        micro_f1,
        micro_f1_excl_neutral,
        per_class,
        confusion: cm,
    })
}

impl MetricsReport {
    /// Aligned human-readable table plus the confusion matrix.
    pub fn render_text(&self) -> String {
        let name_w = self
            .label_names
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>9}  {:>9}  {:>9}  {:>8}",
            "class", "precision", "recall", "f1", "support"
        );
        for (name, s) in self.label_names.iter().zip(&self.per_class) {
            let _ = writeln!(
                out,
                "{:<name_w$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>8}",
                name, s.precision, s.recall, s.f1, s.support
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "accuracy     {:.4}", self.accuracy);
        let _ = writeln!(out, "weighted F1  {:.4}", self.weighted_f1);
        let _ = writeln!(out, "micro F1     {:.4}", self.micro_f1);
        let _ = writeln!(out, "macro F1     {:.4}", self.macro_f1);
        if let Some(m) = self.micro_f1_excl_neutral {
            let _ = writeln!(out, "micro F1 (excl. neutral)  {m:.4}");
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "confusion matrix (rows = true, cols = predicted):");
        let cell_w = 8;
        let _ = write!(out, "{:<name_w$}", "");
        for name in &self.label_names {
            let _ = write!(out, "  {name:>cell_w$}");
        }
        let _ = writeln!(out);
        for (t, name) in self.label_names.iter().enumerate() {
            let _ = write!(out, "{name:<name_w$}");
            for p in 0..self.label_names.len() {
                let _ = write!(out, "  {:>cell_w$}", self.confusion.get(t, p));
            }
            let _ = writeln!(out);
        }
        out
    }

    /// Machine-readable key/value block.
    pub fn render_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "accuracy = {}", self.accuracy);
        let _ = writeln!(out, "weighted_f1 = {}", self.weighted_f1);
        let _ = writeln!(out, "micro_f1 = {}", self.micro_f1);
        let _ = writeln!(out, "macro_f1 = {}", self.macro_f1);
        if let Some(m) = self.micro_f1_excl_neutral {
            let _ = writeln!(out, "micro_f1_excl_neutral = {m}");
        }
        for (c, s) in self.per_class.iter().enumerate() {
            let _ = writeln!(out, "class.{c}.precision = {}", s.precision);
            let _ = writeln!(out, "class.{c}.recall = {}", s.recall);
            let _ = writeln!(out, "class.{c}.f1 = {}", s.f1);
            let _ = writeln!(out, "class.{c}.support = {}", s.support);
        }
        out
    }
}
