use std::collections::BTreeMap;

use serde::Serialize;

use super::EvalError;
use crate::cwe::CweId;

/// Sample-level confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, truth: bool, predicted: bool) {
        match (truth, predicted) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fn_ += 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
    /// Set when nothing was predicted positive; precision is then reported as 0.
    pub precision_undefined: bool,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl BinaryMetrics {
    pub fn from_confusion(c: Confusion) -> Self {
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            accuracy: ratio(c.tp + c.tn, c.total()),
            precision,
            recall,
            f1,
            confusion: c,
            precision_undefined: c.tp + c.fp == 0,
        }
    }
}

/// Predicted vulnerable iff `p >= threshold`.
pub fn binary_metrics(labels: &[bool], probs: &[f64], threshold: f64) -> Result<BinaryMetrics, EvalError> {
    if labels.len() != probs.len() {
        return Err(EvalError::Invalid(format!(
            "{} labels but {} probabilities",
            labels.len(),
            probs.len()
        )));
    }
    if threshold.is_nan() {
        return Err(EvalError::Invalid("threshold is NaN".into()));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(EvalError::Invalid(format!("probability {p} outside [0, 1]")));
    }
    let mut c = Confusion::default();
    for (&y, &p) in labels.iter().zip(probs) {
        c.record(y, p >= threshold);
    }
    Ok(BinaryMetrics::from_confusion(c))
}

/// One prediction annotated with the weakness group it belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CweRecord {
    pub cwe: CweId,
    pub truth: bool,
    pub predicted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CweRow {
    pub cwe: CweId,
    pub samples: usize,
    #[serde(flatten)]
    pub metrics: BinaryMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerCweTable {
    pub rows: Vec<CweRow>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

/// Binary metrics within each CWE group plus their unweighted mean.
/// `expected` lists CWEs that should appear; any with no samples are left
/// out of the table with a warning.
pub fn per_cwe_metrics(records: &[CweRecord], expected: &[CweId]) -> PerCweTable {
    let mut groups: BTreeMap<CweId, Confusion> = BTreeMap::new();
    for r in records {
        groups.entry(r.cwe).or_default().record(r.truth, r.predicted);
    }
    for c in expected {
        if !groups.contains_key(c) {
            log::warn!("{c} has no samples; omitted from per-CWE table");
        }
    }
    let rows: Vec<CweRow> = groups
        .into_iter()
        .map(|(cwe, c)| CweRow {
            cwe,
            samples: c.total(),
            metrics: BinaryMetrics::from_confusion(c),
        })
        .collect();
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&CweRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    PerCweTable {
        macro_precision: mean(|r| r.metrics.precision),
        macro_recall: mean(|r| r.metrics.recall),
        macro_f1: mean(|r| r.metrics.f1),
        rows,
    }
}

impl PerCweTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("cwe,samples,tp,fp,tn,fn,precision,recall,f1\n");
        for r in &self.rows {
            let c = r.metrics.confusion;
            s.push_str(&format!(
                "{},{},{},{},{},{},{:.4},{:.4},{:.4}\n",
                r.cwe, r.samples, c.tp, c.fp, c.tn, c.fn_, r.metrics.precision, r.metrics.recall, r.metrics.f1
            ));
        }
        s.push_str(&format!(
            "macro,,,,,,{:.4},{:.4},{:.4}\n",
            self.macro_precision, self.macro_recall, self.macro_f1
        ));
        s
    }
}
