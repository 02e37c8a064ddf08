//! Dataset curation: dual-verifier agreement and repair, near-duplicate
//! removal, train/eval leakage checks and corpus statistics.

mod agreement;
mod minhash;

pub use agreement::{
    agreement_decide, repair_loop, CurationDecision, Decision, Fault, FormalVerdict, FormalVerifier,
    IdentityRepair, Intent, LlmVerdict, LlmVerifier, LoopStatus, RepairOutcome, Repairer, ScriptLine,
    ScriptedVerifier, DEFAULT_MAX_ITERS,
};
pub use minhash::{exact_jaccard, shingles, MinHashConfig, MinHashSignature, MinHasher};

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::corpus::{Label, Sample};
use crate::cwe::CweId;
use crate::model::tokenizer::Tokenizer;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("{0}")]
    Parse(String),
    #[error("text has no tokens to shingle")]
    EmptyText,
    #[error("signatures use different seeds or lengths")]
    Incompatible,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Removal {
    pub removed: String,
    pub kept: String,
    pub estimate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DedupReport {
    pub threshold: f64,
    pub input: usize,
    pub retained_ids: Vec<String>,
    pub removals: Vec<Removal>,
}

/// Greedy near-duplicate removal within each `(cwe, label)` group, scanning
/// in corpus order. Returns the retained samples in their original order.
pub fn dedup(corpus: &[Sample], hasher: &MinHasher, threshold: f64) -> (Vec<Sample>, DedupReport) {
    let mut kept_by_group: BTreeMap<(Option<CweId>, Label), Vec<(usize, MinHashSignature)>> = BTreeMap::new();
    let mut keep = vec![true; corpus.len()];
    let mut removals = Vec::new();
    for (i, s) in corpus.iter().enumerate() {
        let sig = match hasher.signature(&s.code) {
            Ok(sig) => sig,
            Err(e) => {
                log::warn!("sample `{}` kept without comparison: {e}", s.id);
                continue;
            }
        };
        let group = kept_by_group.entry((s.cwe, s.label)).or_default();
        let hit = group.iter().find_map(|(j, other)| {
            let est = sig.jaccard(other).expect("same hasher");
            (est >= threshold).then_some((*j, est))
        });
        match hit {
            Some((j, est)) => {
                keep[i] = false;
                removals.push(Removal {
                    removed: s.id.clone(),
                    kept: corpus[j].id.clone(),
                    estimate: est,
                });
            }
            None => group.push((i, sig)),
        }
    }
    let retained: Vec<Sample> = corpus
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(s, _)| s.clone())
        .collect();
    let report = DedupReport {
        threshold,
        input: corpus.len(),
        retained_ids: retained.iter().map(|s| s.id.clone()).collect(),
        removals,
    };
    (retained, report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LeakageRow {
    pub eval_id: String,
    pub nearest_train_id: Option<String>,
    pub max_similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LeakageReport {
    pub threshold: f64,
    pub rows: Vec<LeakageRow>,
    pub flagged: Vec<LeakageRow>,
    /// True when no eval sample exceeds the threshold.
    pub passed: bool,
}

/// Largest estimated similarity of every eval sample to the training corpus.
pub fn leakage_check(train: &[Sample], eval: &[Sample], hasher: &MinHasher, threshold: f64) -> LeakageReport {
    let train_sigs: Vec<(&str, MinHashSignature)> = train
        .iter()
        .filter_map(|s| hasher.signature(&s.code).ok().map(|g| (s.id.as_str(), g)))
        .collect();
    let rows: Vec<LeakageRow> = eval
        .iter()
        .map(|s| {
            let mut best = (None, 0.0);
            if let Ok(sig) = hasher.signature(&s.code) {
                for (id, t) in &train_sigs {
                    let e = sig.jaccard(t).expect("same hasher");
                    if best.0.is_none() || e > best.1 {
                        best = (Some(id.to_string()), e);
                    }
                }
            }
            LeakageRow {
                eval_id: s.id.clone(),
                nearest_train_id: best.0,
                max_similarity: best.1,
            }
        })
        .collect();
    let flagged: Vec<LeakageRow> = rows.iter().filter(|r| r.max_similarity > threshold).cloned().collect();
    LeakageReport {
        threshold,
        passed: flagged.is_empty(),
        rows,
        flagged,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistributionRow {
    pub cwe: Option<CweId>,
    pub vulnerable: usize,
    pub safe: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistributionReport {
    pub rows: Vec<DistributionRow>,
    pub total: usize,
    pub vulnerable: usize,
    pub safe: usize,
    /// Vulnerable share with one decimal, e.g. `57.3%`.
    pub vulnerable_share: String,
    pub avg_tokens: f64,
    pub median_tokens: f64,
    pub max_tokens: usize,
}

pub fn percent(part: usize, whole: usize) -> String {
    if whole == 0 {
        return "0.0%".into();
    }
    format!("{:.1}%", 100.0 * part as f64 / whole as f64)
}

pub fn cwe_distribution(corpus: &[Sample], tokenizer: &dyn Tokenizer) -> DistributionReport {
    let mut groups: BTreeMap<Option<CweId>, (usize, usize)> = BTreeMap::new();
    for s in corpus {
        let e = groups.entry(s.cwe).or_default();
        match s.label {
            Label::Vulnerable => e.0 += 1,
            Label::Safe => e.1 += 1,
        }
    }
    let rows: Vec<DistributionRow> = groups
        .into_iter()
        .map(|(cwe, (v, s))| DistributionRow {
            cwe,
            vulnerable: v,
            safe: s,
            total: v + s,
        })
        .collect();
    let vulnerable = rows.iter().map(|r| r.vulnerable).sum();
    let mut lens: Vec<usize> = corpus.iter().map(|s| tokenizer.encode(&s.code).len()).collect();
    lens.sort_unstable();
    let n = lens.len();
    let median = match n {
        0 => 0.0,
        _ if n % 2 == 1 => lens[n / 2] as f64,
        _ => (lens[n / 2 - 1] + lens[n / 2]) as f64 / 2.0,
    };
    DistributionReport {
        total: n,
        vulnerable,
        safe: n - vulnerable,
        vulnerable_share: percent(vulnerable, n),
        avg_tokens: if n == 0 { 0.0 } else { lens.iter().sum::<usize>() as f64 / n as f64 },
        median_tokens: median,
        max_tokens: lens.last().copied().unwrap_or(0),
        rows,
    }
}
