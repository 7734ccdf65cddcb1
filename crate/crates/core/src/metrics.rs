//! Confusion matrices, per-class precision/recall/F1 and A/B deltas.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};

/// Binary confusion counts with the positive label as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn new(tp: usize, fn_: usize, fp: usize, tn: usize) -> Self {
        ConfusionMatrix { tp, fn_, fp, tn }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.fp + self.tn
    }

    /// The same predictions scored with the negative class as "positive".
    pub fn swapped(&self) -> Self {
        ConfusionMatrix {
            tp: self.tn,
            fn_: self.fp,
            fp: self.fn_,
            tn: self.tp,
        }
    }
}

pub fn confusion(predictions: &[Label], truths: &[Label]) -> Result<ConfusionMatrix> {
    if predictions.len() != truths.len() {
        return Err(Error::usage(format!(
            "{} predictions for {} ground-truth labels",
            predictions.len(),
            truths.len()
        )));
    }
    if truths.is_empty() {
        return Err(Error::usage("confusion matrix needs at least one item"));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in predictions.iter().zip(truths) {
        match (t, p) {
            (Label::Positive, Label::Positive) => cm.tp += 1,
            (Label::Positive, Label::Negative) => cm.fn_ += 1,
            (Label::Negative, Label::Positive) => cm.fp += 1,
            (Label::Negative, Label::Negative) => cm.tn += 1,
        }
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub dataset: String,
    pub counts: ConfusionMatrix,
    pub accuracy: f64,
    pub per_class: BTreeMap<Label, ClassMetrics>,
    /// Metrics whose denominator was zero; they are reported as 0.
    pub degenerate: Vec<String>,
}

impl EvalReport {
    pub fn class(&self, label: Label) -> ClassMetrics {
        self.per_class[&label]
    }
}

fn ratio(num: usize, den: usize, name: String, degenerate: &mut Vec<String>) -> f64 {
    if den == 0 {
        degenerate.push(name);
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy plus precision, recall and F1 for each class.
pub fn report(cm: &ConfusionMatrix, model: &str, dataset: &str) -> Result<EvalReport> {
    if cm.total() == 0 {
        return Err(Error::usage("cannot report on an empty confusion matrix"));
    }
    let mut degenerate = Vec::new();
    let mut per_class = BTreeMap::new();
    for label in [Label::Positive, Label::Negative] {
        let m = if label == Label::Positive { *cm } else { cm.swapped() };
        let precision = ratio(m.tp, m.tp + m.fp, format!("precision_{label}"), &mut degenerate);
        let recall = ratio(m.tp, m.tp + m.fn_, format!("recall_{label}"), &mut degenerate);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            degenerate.push(format!("f1_{label}"));
            0.0
        };
        per_class.insert(label, ClassMetrics { precision, recall, f1 });
    }
    Ok(EvalReport {
        model: model.to_string(),
        dataset: dataset.to_string(),
        counts: *cm,
        accuracy: (cm.tp + cm.tn) as f64 / cm.total() as f64,
        per_class,
        degenerate,
    })
}

/// Signed differences `candidate - baseline`, in percentage points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub baseline: String,
    pub candidate: String,
    pub dataset: String,
    pub accuracy: f64,
    pub per_class: BTreeMap<Label, ClassMetrics>,
}

pub fn compare(baseline: &EvalReport, candidate: &EvalReport) -> Result<DeltaReport> {
    if baseline.dataset != candidate.dataset {
        return Err(Error::usage(format!(
            "reports are on different datasets: {:?} vs {:?}",
            baseline.dataset, candidate.dataset
        )));
    }
    let pp = |a: f64, b: f64| (b - a) * 100.0;
    let per_class = Label::ALL
        .iter()
        .map(|&l| {
            let (a, b) = (baseline.class(l), candidate.class(l));
            (
                l,
                ClassMetrics {
                    precision: pp(a.precision, b.precision),
                    recall: pp(a.recall, b.recall),
                    f1: pp(a.f1, b.f1),
                },
            )
        })
        .collect();
    Ok(DeltaReport {
        baseline: baseline.model.clone(),
        candidate: candidate.model.clone(),
        dataset: baseline.dataset.clone(),
        accuracy: pp(baseline.accuracy, candidate.accuracy),
        per_class,
    })
}

const TABLE_HEADER: [&str; 8] = [
    "Model", "Accuracy", "F1 pos", "F1 neg", "Prec pos", "Prec neg", "Rec pos", "Rec neg",
];

/// Fixed-width table with columns: accuracy, F1, precision, recall (each
/// positive then negative), values at four decimals.
pub fn render_table(reports: &[EvalReport]) -> String {
    let name_w = reports
        .iter()
        .map(|r| r.model.len())
        .max()
        .unwrap_or(0)
        .max(TABLE_HEADER[0].len());
    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}", TABLE_HEADER[0]);
    for h in &TABLE_HEADER[1..] {
        let _ = write!(out, "  {h:>9}");
    }
    out.push('\n');
    for r in reports {
        let (p, n) = (r.class(Label::Positive), r.class(Label::Negative));
        let _ = write!(out, "{:<name_w$}", r.model);
        for v in [r.accuracy, p.f1, n.f1, p.precision, n.precision, p.recall, n.recall] {
            let _ = write!(out, "  {v:>9.4}");
        }
        out.push('\n');
    }
    out
}

pub fn render_delta(d: &DeltaReport) -> String {
    let (p, n) = (d.per_class[&Label::Positive], d.per_class[&Label::Negative]);
    let name = format!("{} - {}", d.candidate, d.baseline);
    let mut out = String::new();
    let _ = write!(out, "{name} (pp):");
    for v in [d.accuracy, p.f1, n.f1, p.precision, n.precision, p.recall, n.recall] {
        let _ = write!(out, "  {v:>+8.2}");
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    use Label::{Negative as N, Positive as P};

    #[test]
    fn perfect_and_inverted_predictors() {
        assert_eq!(
            confusion(&[P, P, P], &[P, P, P]).unwrap(),
            ConfusionMatrix::new(3, 0, 0, 0)
        );
        let truths = [P, N, N, P];
        let inverted: Vec<Label> = truths.iter().map(|l| l.other()).collect();
        let cm = confusion(&inverted, &truths).unwrap();
        assert_eq!((cm.tp, cm.tn), (0, 0));
    }

    #[test]
    fn hand_counted_mixed_case() {
        let truths = [P, P, P, N, N, N];
        let preds = [P, N, P, P, N, N];
        assert_eq!(confusion(&preds, &truths).unwrap(), ConfusionMatrix::new(2, 1, 1, 2));
        assert!(matches!(confusion(&preds[..2], &truths), Err(Error::Usage(_))));
        assert!(matches!(confusion(&[], &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn no_positive_items_is_degenerate() {
        let r = report(&ConfusionMatrix::new(0, 0, 0, 10), "m", "d").unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.class(P).precision, 0.0);
        assert!(r.degenerate.contains(&"precision_positive".to_string()));
        assert!(matches!(
            report(&ConfusionMatrix::default(), "m", "d"),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn self_compare_is_zero() {
        let r = report(&ConfusionMatrix::new(3, 1, 2, 4), "m", "d").unwrap();
        let d = compare(&r, &r).unwrap();
        assert_eq!(d.accuracy, 0.0);
        assert!(d
            .per_class
            .values()
            .all(|m| m.precision == 0.0 && m.recall == 0.0 && m.f1 == 0.0));
        let mut other = r.clone();
        other.dataset = "elsewhere".into();
        assert!(matches!(compare(&r, &other), Err(Error::Usage(_))));
    }

    #[test]
    fn json_layout() {
        let r = report(&ConfusionMatrix::new(1, 2, 3, 4), "m", "d").unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["counts"]["fn"], 2);
        assert!(v["per_class"]["positive"]["precision"].is_number());
        assert!(v["degenerate"].is_array());
        let back: EvalReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn table_has_one_row_per_report() {
        let r = report(&ConfusionMatrix::new(1, 2, 3, 4), "baseline", "d").unwrap();
        let t = render_table(&[r.clone(), r]);
        assert_eq!(t.lines().count(), 3);
        assert!(t.lines().next().unwrap().contains("Prec pos"));
    }

    proptest! {
        #[test]
        fn accuracy_is_weighted_recall(tp in 0usize..200, fn_ in 0usize..200, fp in 0usize..200, tn in 0usize..200) {
            let cm = ConfusionMatrix::new(tp, fn_, fp, tn);
            prop_assume!(cm.positives() > 0 && cm.negatives() > 0);
            let r = report(&cm, "m", "d").unwrap();
            let weighted = (r.class(P).recall * cm.positives() as f64 + r.class(N).recall * cm.negatives() as f64)
                / cm.total() as f64;
            prop_assert!((r.accuracy - weighted).abs() < 1e-12);
            prop_assert!(r.per_class.values().all(|m| (0.0..=1.0).contains(&m.precision)
                && (0.0..=1.0).contains(&m.recall) && (0.0..=1.0).contains(&m.f1)));
        }

        #[test]
        fn swapping_polarity_swaps_classes(tp in 0usize..50, fn_ in 0usize..50, fp in 0usize..50, tn in 1usize..50) {
            let cm = ConfusionMatrix::new(tp, fn_, fp, tn);
            let a = report(&cm, "m", "d").unwrap();
            let b = report(&cm.swapped(), "m", "d").unwrap();
            prop_assert_eq!(a.accuracy, b.accuracy);
            prop_assert_eq!(a.class(P), b.class(N));
            prop_assert_eq!(a.class(N), b.class(P));
        }
    }
}
