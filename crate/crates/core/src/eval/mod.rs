//! Benchmark scoring and classification metrics.

mod castle;
mod metrics;

pub use castle::{
    castle_score, sample_score, tool_result, BenchmarkSample, BonusTable, Branch, CastleCounts,
    CastleReport, FindingsRecord, Hierarchy, SampleBreakdown, SampleScore, ToolResult,
};
pub use metrics::{binary_metrics, per_cwe_metrics, BinaryMetrics, Confusion, CweRecord, CweRow, PerCweTable};

use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;

use crate::cwe::CweId;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{what} line {line}: {msg}")]
    Parse {
        what: &'static str,
        line: usize,
        msg: String,
    },
    #[error("hierarchy contains a cycle")]
    Cycle,
    #[error("results reference unknown sample ids: {}", .0.join(", "))]
    UnknownIds(Vec<String>),
    #[error("{0}")]
    Invalid(String),
}

/// A model's output for one benchmark sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub p_vul: f64,
    /// Highest-scoring CWE class, reported as the finding when flagged.
    pub cwe: Option<CweId>,
}

/// Turns thresholded predictions into a tool result (one finding per flagged sample).
pub fn findings_at(benchmark: &[BenchmarkSample], preds: &[Prediction], threshold: f64) -> ToolResult {
    benchmark
        .iter()
        .zip(preds)
        .map(|(s, p)| {
            let set: BTreeSet<CweId> = match p.cwe {
                Some(c) if p.p_vul >= threshold => [c].into(),
                _ => BTreeSet::new(),
            };
            (s.id.clone(), set)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub castle: f64,
    pub f1: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub reference_threshold: f64,
    pub reference_castle: f64,
    pub reference_f1: f64,
    pub points: Vec<SweepPoint>,
    /// Largest `|castle(t) - castle(reference)|` over the grid.
    pub max_castle_deviation: f64,
    pub max_f1_deviation: f64,
}

/// Grid `lo, lo + step, ..., hi`, with each point rounded to 1e-9 so that
/// decimal thresholds such as 0.45 are exact.
pub fn threshold_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>, EvalError> {
    if !(step > 0.0) || hi < lo {
        return Err(EvalError::Invalid(format!("bad sweep range [{lo}, {hi}] step {step}")));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| ((lo + i as f64 * step) * 1e9).round() / 1e9).collect())
}

/// CASTLE score and F1 at each threshold, relative to the reference point.
pub fn threshold_sweep(
    benchmark: &[BenchmarkSample],
    preds: &[Prediction],
    bonus: &BonusTable,
    hierarchy: &Hierarchy,
    grid: &[f64],
    reference: f64,
) -> Result<SweepReport, EvalError> {
    if benchmark.len() != preds.len() {
        return Err(EvalError::Invalid(format!(
            "{} samples but {} predictions",
            benchmark.len(),
            preds.len()
        )));
    }
    let labels: Vec<bool> = benchmark.iter().map(|s| s.label.is_vulnerable()).collect();
    let probs: Vec<f64> = preds.iter().map(|p| p.p_vul).collect();
    let at = |t: f64| -> Result<SweepPoint, EvalError> {
        let castle = castle_score(benchmark, &findings_at(benchmark, preds, t), bonus, hierarchy)?.total;
        let m = binary_metrics(&labels, &probs, t)?;
        Ok(SweepPoint {
            threshold: t,
            castle,
            f1: m.f1,
            recall: m.recall,
        })
    };
    let base = at(reference)?;
    let points = grid.iter().map(|&t| at(t)).collect::<Result<Vec<_>, _>>()?;
    let max_dev = |f: fn(&SweepPoint) -> f64| {
        points
            .iter()
            .map(|p| (f(p) - f(&base)).abs())
            .fold(0.0, f64::max)
    };
    Ok(SweepReport {
        reference_threshold: reference,
        reference_castle: base.castle,
        reference_f1: base.f1,
        max_castle_deviation: max_dev(|p| p.castle),
        max_f1_deviation: max_dev(|p| p.f1),
        points,
    })
}
