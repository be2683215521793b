use serde::{Deserialize, Serialize};

use crate::dbt::Decision;
use crate::feature_store::Label;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub image_id: String,
    pub label: Label,
    pub predicted: Decision,
    /// Prediction came from the unparseable-answer policy.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unparseable: bool,
}

/// Confusion counts with anomalous as the positive class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Precision had no positive predictions and was set to 1.
    pub precision_undefined: bool,
    /// Recall had no positive labels and was set to 1.
    pub recall_undefined: bool,
    pub unparseable: usize,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let n = tp + fp + tn + fn_;
        let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp,
            fp,
            tn,
            fn_,
            accuracy: ratio(tp + tn, n),
            precision,
            recall,
            f1,
            precision_undefined: tp + fp == 0,
            recall_undefined: tp + fn_ == 0,
            unparseable: 0,
            rows: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn evaluate(rows: Vec<EvalRow>) -> EvalReport {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for r in &rows {
        match (r.label, r.predicted) {
            (Label::Anomalous, Decision::Abnormal) => tp += 1,
            (Label::Normal, Decision::Abnormal) => fp += 1,
            (Label::Normal, Decision::Normal) => tn += 1,
            (Label::Anomalous, Decision::Normal) => fn_ += 1,
        }
    }
    EvalReport {
        unparseable: rows.iter().filter(|r| r.unparseable).count(),
        rows,
        ..EvalReport::from_counts(tp, fp, tn, fn_)
    }
}
