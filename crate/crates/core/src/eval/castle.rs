use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::corpus::Label;
use crate::cwe::CweId;
use crate::loss::RankTable;

/// One-step parent/child relation over CWE ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Hierarchy {
    parents: BTreeMap<CweId, BTreeSet<CweId>>,
    children: BTreeMap<CweId, BTreeSet<CweId>>,
}

impl Hierarchy {
    /// Parses `parent,child` lines (`#` comments allowed) and rejects cycles.
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut h = Hierarchy::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| EvalError::Parse {
                what: "hierarchy",
                line: i + 1,
                msg,
            };
            let (p, c) = line
                .split_once(',')
                .ok_or_else(|| bad(format!("expected `parent,child`, got `{line}`")))?;
            let p: CweId = p.parse().map_err(|e| bad(format!("{e}")))?;
            let c: CweId = c.parse().map_err(|e| bad(format!("{e}")))?;
            h.add_edge(p, c);
        }
        h.check_acyclic()?;
        Ok(h)
    }

    pub fn add_edge(&mut self, parent: CweId, child: CweId) {
        self.children.entry(parent).or_default().insert(child);
        self.parents.entry(child).or_default().insert(parent);
    }

    pub fn knows(&self, id: CweId) -> bool {
        self.parents.contains_key(&id) || self.children.contains_key(&id)
    }

    fn check_acyclic(&self) -> Result<(), EvalError> {
        // Kahn's algorithm over all nodes that have children.
        let mut indeg: BTreeMap<CweId, usize> = BTreeMap::new();
        for (&p, cs) in &self.children {
            indeg.entry(p).or_insert(0);
            for &c in cs {
                *indeg.entry(c).or_insert(0) += 1;
            }
        }
        let mut queue: Vec<CweId> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&n, _)| n).collect();
        let mut seen = 0;
        while let Some(n) = queue.pop() {
            seen += 1;
            for c in self.children.get(&n).into_iter().flatten() {
                let d = indeg.get_mut(c).expect("child counted");
                *d -= 1;
                if *d == 0 {
                    queue.push(*c);
                }
            }
        }
        if seen == indeg.len() {
            Ok(())
        } else {
            Err(EvalError::Cycle)
        }
    }

    /// Equality, or a direct parent or child of the truth.
    pub fn matches(&self, pred: CweId, truth: CweId) -> bool {
        if pred == truth {
            return true;
        }
        for id in [pred, truth] {
            if !self.knows(id) {
                log::warn!("{id} is not in the hierarchy; treated as a leaf");
            }
        }
        let rel = |m: &BTreeMap<CweId, BTreeSet<CweId>>| m.get(&truth).is_some_and(|s| s.contains(&pred));
        rel(&self.parents) || rel(&self.children)
    }
}

/// Bonus points per CWE; unknown CWEs earn nothing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BonusTable {
    bonus: BTreeMap<CweId, f64>,
}

impl BonusTable {
    pub fn new(entries: impl IntoIterator<Item = (CweId, f64)>) -> Result<Self, EvalError> {
        let mut bonus = BTreeMap::new();
        for (c, b) in entries {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(EvalError::Invalid(format!("bonus for {c} must be >= 0, got {b}")));
            }
            bonus.insert(c, b);
        }
        Ok(Self { bonus })
    }

    /// Parses `CWE-id,points` lines.
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| EvalError::Parse {
                what: "bonus table",
                line: i + 1,
                msg,
            };
            let (c, b) = line
                .split_once(',')
                .ok_or_else(|| bad(format!("expected `CWE-id,points`, got `{line}`")))?;
            let c: CweId = c.parse().map_err(|e| bad(format!("{e}")))?;
            let b: f64 = b.trim().parse().map_err(|_| bad(format!("bad points `{}`", b.trim())))?;
            entries.push((c, b));
        }
        Self::new(entries)
    }

    /// Linear schedule `2 * (26 - r) / 25` over ranked CWEs.
    pub fn from_ranks(ranks: &RankTable) -> Self {
        Self {
            bonus: ranks
                .iter()
                .filter(|&(_, r)| r <= crate::loss::TOP_N)
                .map(|(c, r)| (c, 2.0 * f64::from(26 - r) / 25.0))
                .collect(),
        }
    }

    pub fn get(&self, cwe: CweId) -> f64 {
        self.bonus.get(&cwe).copied().unwrap_or(0.0)
    }

    pub fn max(&self) -> f64 {
        self.bonus.values().copied().fold(0.0, f64::max)
    }
}

/// Benchmark manifest row. Safe samples may name a CWE as grouping metadata;
/// only vulnerable samples have a ground-truth weakness.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkSample {
    pub id: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cwe: Option<CweId>,
}

impl BenchmarkSample {
    pub fn truth(&self) -> Option<CweId> {
        if self.label.is_vulnerable() {
            self.cwe
        } else {
            None
        }
    }
}

impl From<&crate::corpus::Sample> for BenchmarkSample {
    fn from(s: &crate::corpus::Sample) -> Self {
        Self {
            id: s.id.clone(),
            label: s.label,
            cwe: s.cwe,
        }
    }
}

/// Findings JSONL row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FindingsRecord {
    pub id: String,
    pub findings: Vec<CweId>,
}

/// Deduplicated findings per sample id.
pub type ToolResult = BTreeMap<String, BTreeSet<CweId>>;

pub fn tool_result(records: &[FindingsRecord]) -> ToolResult {
    let mut out = ToolResult::new();
    for r in records {
        out.entry(r.id.clone()).or_default().extend(r.findings.iter().copied());
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Vulnerable sample with a matching finding.
    Detected,
    /// Safe sample with no findings.
    CorrectSilence,
    Otherwise,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleScore {
    pub score: f64,
    pub branch: Branch,
    pub matched: Option<CweId>,
    pub bonus: f64,
    pub num_findings: usize,
}

/// Per-sample benchmark score.
///
/// A vulnerable sample whose findings include a match earns
/// `5 - |findings| + 1 + B(match)`; a safe sample with no findings earns 2;
/// anything else costs one point per finding. Among several matches the
/// highest-bonus one is used, and at most one bonus is earned.
pub fn sample_score(
    sample: &BenchmarkSample,
    findings: &BTreeSet<CweId>,
    bonus: &BonusTable,
    hierarchy: &Hierarchy,
) -> SampleScore {
    let n = findings.len();
    if let Some(truth) = sample.truth() {
        let best = findings
            .iter()
            .filter(|&&f| hierarchy.matches(f, truth))
            .map(|&f| (f, bonus.get(f)))
            .fold(None::<(CweId, f64)>, |acc, (f, b)| match acc {
                Some((_, ab)) if ab >= b => acc,
                _ => Some((f, b)),
            });
        if let Some((m, b)) = best {
            return SampleScore {
                score: 5.0 - n as f64 + 1.0 + b,
                branch: Branch::Detected,
                matched: Some(m),
                bonus: b,
                num_findings: n,
            };
        }
    } else if n == 0 {
        return SampleScore {
            score: 2.0,
            branch: Branch::CorrectSilence,
            matched: None,
            bonus: 0.0,
            num_findings: 0,
        };
    }
    SampleScore {
        score: -(n as f64),
        branch: Branch::Otherwise,
        matched: None,
        bonus: 0.0,
        num_findings: n,
    }
}

/// Finding-level counts: each matching finding on a vulnerable sample is a
/// TP, every other finding an FP; unmatched vulnerable samples add an FN and
/// silent safe samples a TN.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CastleCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleBreakdown {
    pub id: String,
    #[serde(flatten)]
    pub score: SampleScore,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CastleReport {
    pub total: f64,
    pub total_bonus: f64,
    pub counts: CastleCounts,
    pub samples: Vec<SampleBreakdown>,
}

pub fn castle_score(
    benchmark: &[BenchmarkSample],
    results: &ToolResult,
    bonus: &BonusTable,
    hierarchy: &Hierarchy,
) -> Result<CastleReport, EvalError> {
    let ids: BTreeSet<&str> = benchmark.iter().map(|s| s.id.as_str()).collect();
    let unknown: Vec<String> = results
        .keys()
        .filter(|k| !ids.contains(k.as_str()))
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(EvalError::UnknownIds(unknown));
    }
    let empty = BTreeSet::new();
    let mut counts = CastleCounts::default();
    let mut samples = Vec::with_capacity(benchmark.len());
    let mut total = 0.0;
    let mut total_bonus = 0.0;
    for s in benchmark {
        let f = results.get(&s.id).unwrap_or(&empty);
        let sc = sample_score(s, f, bonus, hierarchy);
        match s.truth() {
            Some(truth) => {
                let hits = f.iter().filter(|&&x| hierarchy.matches(x, truth)).count();
                counts.tp += hits;
                counts.fp += f.len() - hits;
                if hits == 0 {
                    counts.fn_ += 1;
                }
            }
            None if f.is_empty() => counts.tn += 1,
            None => counts.fp += f.len(),
        }
        total += sc.score;
        total_bonus += sc.bonus;
        samples.push(SampleBreakdown {
            id: s.id.clone(),
            score: sc,
        });
    }
    Ok(CastleReport {
        total,
        total_bonus,
        counts,
        samples,
    })
}
