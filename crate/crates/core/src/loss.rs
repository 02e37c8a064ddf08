//! Rank-weighted multi-label CWE loss, binary vulnerability loss and their
//! weighted sum.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cwe::{CweId, DEFAULT_RANKS};
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Number of ranked weaknesses; anything ranked lower gets no extra weight.
pub const TOP_N: u32 = 25;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("rank must be at least 1, got {0}")]
    InvalidRank(u32),
    #[error("rank table line {line}: {msg}")]
    RankTable { line: usize, msg: String },
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("label shape: {0}")]
    Labels(String),
    #[error("non-finite {component} loss ({value}); aborting training")]
    NonFinite { component: &'static str, value: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// MITRE rank per CWE. Absent CWEs are unranked (treated as rank infinity).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RankTable {
    ranks: BTreeMap<CweId, u32>,
}

impl RankTable {
    /// Parses `CWE-id,rank` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, LossError> {
        let mut ranks = BTreeMap::new();
        let mut taken: BTreeMap<u32, CweId> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| LossError::RankTable { line: i + 1, msg };
            let (id, rank) = line
                .split_once(',')
                .ok_or_else(|| err(format!("expected `CWE-id,rank`, got `{line}`")))?;
            let id: CweId = id.parse().map_err(|e| err(format!("{e}")))?;
            let rank: u32 = rank
                .trim()
                .parse()
                .map_err(|_| err(format!("rank `{}` is not a positive integer", rank.trim())))?;
            if rank == 0 {
                return Err(err("rank must be positive".into()));
            }
            if let Some(other) = taken.insert(rank, id) {
                return Err(err(format!("rank {rank} assigned to both {other} and {id}")));
            }
            if ranks.insert(id, rank).is_some() {
                return Err(err(format!("{id} listed twice")));
            }
        }
        Ok(Self { ranks })
    }

    pub fn rank(&self, cwe: CweId) -> Option<u32> {
        self.ranks.get(&cwe).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (CweId, u32)> + '_ {
        self.ranks.iter().map(|(&c, &r)| (c, r))
    }
}

pub fn default_rank_table() -> RankTable {
    RankTable::parse(DEFAULT_RANKS).expect("bundled rank table parses")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub w1: f64,
    pub w2: f64,
    pub tau: f64,
    pub eps_p: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            w1: 10.0,
            w2: 1.0,
            tau: 0.5,
            eps_p: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.gamma >= 0.0) {
            return Err(LossError::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(LossError::Config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if !(self.eps_p > 0.0 && self.eps_p <= 1e-3) {
            return Err(LossError::Config(format!(
                "eps_p must lie in (0, 1e-3], got {}",
                self.eps_p
            )));
        }
        Ok(())
    }
}

/// `(26 - r) / 25` inside the Top 25, zero outside. `None` is rank infinity.
pub fn rank_factor(rank: Option<u32>) -> Result<f64, LossError> {
    match rank {
        Some(0) => Err(LossError::InvalidRank(0)),
        Some(r) if r <= TOP_N => Ok(f64::from(TOP_N + 1 - r) / f64::from(TOP_N)),
        _ => Ok(0.0),
    }
}

pub fn rank_weight(rank: Option<u32>, gamma: f64) -> Result<f64, LossError> {
    Ok(1.0 + gamma * rank_factor(rank)?)
}

/// Per-class weights for a classifier head, in head order.
pub fn class_weights(classes: &[CweId], ranks: &RankTable, gamma: f64) -> Vec<f64> {
    classes
        .iter()
        .map(|&c| {
            let r = ranks.rank(c);
            if r.is_none() {
                log::debug!("{c} has no rank; using base weight");
            }
            rank_weight(r, gamma).expect("table ranks are positive")
        })
        .collect()
}

pub fn bce(y: f64, p: f64, eps_p: f64) -> f64 {
    let p = p.clamp(eps_p, 1.0 - eps_p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Binary label plus multi-hot CWE targets in head order.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVector {
    pub vul: bool,
    pub cwe: Vec<f64>,
}

impl LabelVector {
    pub fn new(vul: bool, cwe: Vec<f64>) -> Result<Self, LossError> {
        if !vul && cwe.iter().any(|&y| y != 0.0) {
            return Err(LossError::Labels("safe sample carries CWE labels".into()));
        }
        if cwe.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(LossError::Labels("CWE targets must be 0 or 1".into()));
        }
        Ok(Self { vul, cwe })
    }

    /// Multi-hot vector with the given CWE set (empty for safe samples).
    pub fn from_cwes(vul: bool, cwes: &[CweId], classes: &[CweId]) -> Result<Self, LossError> {
        let mut y = vec![0.0; classes.len()];
        if vul {
            for c in cwes {
                match classes.iter().position(|k| k == c) {
                    Some(i) => y[i] = 1.0,
                    None => log::warn!("{c} is not a head class; ignored"),
                }
            }
        }
        Self::new(vul, y)
    }
}

/// Plain-value CWE loss: mean over all samples of the rank-weighted BCE sum,
/// with samples whose `p_vul < tau` contributing zero.
pub fn cwe_loss_value(
    labels: &[LabelVector],
    cwe_probs: &[Vec<f64>],
    p_vul: &[f64],
    weights: &[f64],
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    check_batch(labels, p_vul.len(), weights.len())?;
    if cwe_probs.len() != labels.len() {
        return Err(LossError::Labels("probability rows do not match labels".into()));
    }
    let mut total = 0.0;
    for ((lab, probs), &pv) in labels.iter().zip(cwe_probs).zip(p_vul) {
        if pv < cfg.tau {
            continue;
        }
        total += lab
            .cwe
            .iter()
            .zip(probs)
            .zip(weights)
            .map(|((&y, &p), &w)| w * bce(y, p, cfg.eps_p))
            .sum::<f64>();
    }
    Ok(total / labels.len() as f64)
}

fn check_batch(labels: &[LabelVector], n: usize, classes: usize) -> Result<(), LossError> {
    if labels.is_empty() {
        return Err(LossError::Labels("empty batch".into()));
    }
    if labels.len() != n {
        return Err(LossError::Labels(format!(
            "{} labels for {} predictions",
            labels.len(),
            n
        )));
    }
    if let Some(l) = labels.iter().find(|l| l.cwe.len() != classes) {
        return Err(LossError::Labels(format!(
            "label has {} classes, head has {}",
            l.cwe.len(),
            classes
        )));
    }
    Ok(())
}

/// Clamped BCE of probabilities `p` (`[n, c]`) against fixed weights for the
/// positive and negative terms; returns the sum over all entries.
fn weighted_bce_sum(
    g: &mut Graph,
    p: Var,
    pos: Tensor,
    neg: Tensor,
    eps_p: f64,
) -> Result<Var, LossError> {
    let p = g.clamp(p, eps_p, 1.0 - eps_p);
    let log_p = g.ln(p);
    let q = g.affine(p, -1.0, 1.0);
    let log_q = g.ln(q);
    let pos = g.constant(pos);
    let neg = g.constant(neg);
    let a = g.mul(log_p, pos)?;
    let b = g.mul(log_q, neg)?;
    let s = g.add(a, b)?;
    let s = g.sum(s);
    Ok(g.scale(s, -1.0))
}

/// Graph CWE loss on head logits `[n, c]`. `p_vul` is the detached
/// vulnerability probability used for the confidence mask.
pub fn cwe_loss(
    g: &mut Graph,
    cwe_logits: Var,
    labels: &[LabelVector],
    p_vul: &[f64],
    weights: &[f64],
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    check_batch(labels, p_vul.len(), weights.len())?;
    let shape = g.value(cwe_logits).shape().to_vec();
    if shape != [labels.len(), weights.len()] {
        return Err(LossError::Labels(format!(
            "logits shape {shape:?} vs {} samples x {} classes",
            labels.len(),
            weights.len()
        )));
    }
    let c = weights.len();
    let mut pos = Vec::with_capacity(labels.len() * c);
    let mut neg = Vec::with_capacity(labels.len() * c);
    for (lab, &pv) in labels.iter().zip(p_vul) {
        let m = if pv >= cfg.tau { 1.0 } else { 0.0 };
        for (&y, &w) in lab.cwe.iter().zip(weights) {
            pos.push(m * w * y);
            neg.push(m * w * (1.0 - y));
        }
    }
    let probs = g.sigmoid(cwe_logits);
    let s = weighted_bce_sum(
        g,
        probs,
        Tensor::new(shape.clone(), pos)?,
        Tensor::new(shape, neg)?,
        cfg.eps_p,
    )?;
    Ok(g.scale(s, 1.0 / labels.len() as f64))
}

/// `p_vul` per row of two-class logits (softmax at the vulnerable class).
pub fn vulnerable_probability(g: &mut Graph, binary_logits: Var) -> Result<Var, LossError> {
    let n = g.value(binary_logits).rows();
    if g.value(binary_logits).shape() != [n, 2] {
        return Err(LossError::Labels(format!(
            "binary head must emit 2 logits, got shape {:?}",
            g.value(binary_logits).shape()
        )));
    }
    let sm = g.softmax(binary_logits, 1)?;
    let idx: Vec<usize> = (0..n).map(|i| 2 * i + 1).collect();
    Ok(g.pick(sm, &idx)?)
}

/// Unweighted mean BCE of the vulnerable-class probability. Returns the loss
/// and the `[n, 1]` probability node.
pub fn vul_loss(
    g: &mut Graph,
    binary_logits: Var,
    labels: &[bool],
    cfg: &LossConfig,
) -> Result<(Var, Var), LossError> {
    let p = vulnerable_probability(g, binary_logits)?;
    let n = labels.len();
    if g.value(p).rows() != n || n == 0 {
        return Err(LossError::Labels(format!(
            "{} labels for {} logit rows",
            n,
            g.value(p).rows()
        )));
    }
    let y: Vec<f64> = labels.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let pos = Tensor::new(vec![n, 1], y.clone())?;
    let neg = Tensor::new(vec![n, 1], y.iter().map(|v| 1.0 - v).collect())?;
    let s = weighted_bce_sum(g, p, pos, neg, cfg.eps_p)?;
    Ok((g.scale(s, 1.0 / n as f64), p))
}

/// `W1 * L_vul + W2 * L_cwe`, rejecting non-finite components.
pub fn total_loss(l_vul: f64, l_cwe: f64, cfg: &LossConfig) -> Result<f64, LossError> {
    check_finite("vulnerability", l_vul)?;
    check_finite("cwe", l_cwe)?;
    let t = cfg.w1 * l_vul + cfg.w2 * l_cwe;
    check_finite("total", t)?;
    Ok(t)
}

pub fn check_finite(component: &'static str, value: f64) -> Result<(), LossError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(LossError::NonFinite { component, value })
    }
}

/// Graph form of [`total_loss`]; `l_cwe` may be absent (binary-only stages).
pub fn combine(
    g: &mut Graph,
    l_vul: Var,
    l_cwe: Option<Var>,
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    check_finite("vulnerability", g.value(l_vul).item())?;
    let a = g.scale(l_vul, cfg.w1);
    let Some(l_cwe) = l_cwe else {
        return Ok(a);
    };
    check_finite("cwe", g.value(l_cwe).item())?;
    let b = g.scale(l_cwe, cfg.w2);
    Ok(g.add(a, b)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn rank_factor_branches() {
        assert_eq!(rank_factor(Some(1)).unwrap(), 1.0);
        assert_eq!(rank_factor(Some(26)).unwrap(), 0.0);
        assert!((rank_factor(Some(2)).unwrap() - 0.96).abs() < 1e-15);
        assert_eq!(rank_factor(None).unwrap(), 0.0);
        assert!(matches!(rank_factor(Some(0)), Err(LossError::InvalidRank(0))));
    }

    #[test]
    fn weights_for_named_ranks() {
        assert!((rank_weight(Some(2), 2.0).unwrap() - 2.92).abs() < 1e-12);
        assert!((rank_weight(Some(7), 2.0).unwrap() - 2.52).abs() < 1e-12);
        assert_eq!(rank_weight(Some(40), 2.0).unwrap(), 1.0);
        assert_eq!(rank_weight(None, 2.0).unwrap(), 1.0);
    }

    #[test]
    fn weight_non_increasing_in_rank() {
        let w: Vec<f64> = (1..=30).map(|r| rank_weight(Some(r), 2.0).unwrap()).collect();
        assert!(w.windows(2).all(|p| p[0] >= p[1]));
        assert!(w[25..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bce_examples() {
        let eps = 1e-7;
        assert!(bce(1.0, 1.0 - eps, eps) < 1e-6);
        assert!((bce(1.0, 0.5, eps) - LN2).abs() < 1e-15);
        assert!((bce(0.0, 0.5, eps) - LN2).abs() < 1e-15);
        assert!((bce(1.0, 0.0, eps) + eps.ln()).abs() < 1e-12);
    }

    #[test]
    fn rank_table_parsing() {
        let t = RankTable::parse("# comment\nCWE-787,2\n\nCWE-416, 7\n").unwrap();
        assert_eq!(t.rank(CweId(787)), Some(2));
        assert_eq!(t.rank(CweId(416)), Some(7));
        assert_eq!(t.rank(CweId(1)), None);
        assert!(RankTable::parse("CWE-1,3\nCWE-2,3").is_err());
        assert!(RankTable::parse("CWE-1,0").is_err());
        let e = RankTable::parse("CWE-1,3\nbogus").unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
        let d = default_rank_table();
        assert_eq!(d.rank(CweId(787)), Some(2));
        assert_eq!(d.rank(CweId(416)), Some(7));
    }

    #[test]
    fn config_validation() {
        LossConfig::default().validate().unwrap();
        let bad = LossConfig { tau: 1.0, ..LossConfig::default() };
        assert!(bad.validate().is_err());
        let bad = LossConfig { eps_p: 1e-2, ..LossConfig::default() };
        assert!(bad.validate().is_err());
        let bad = LossConfig { gamma: -1.0, ..LossConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn safe_label_with_cwe_rejected() {
        assert!(LabelVector::new(false, vec![1.0, 0.0]).is_err());
        let classes = [CweId(1), CweId(2)];
        let l = LabelVector::from_cwes(false, &[CweId(1)], &classes).unwrap();
        assert_eq!(l.cwe, vec![0.0, 0.0]);
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn masked_batch_has_zero_cwe_loss() {
        let cfg = LossConfig::default();
        let labels = vec![LabelVector::new(true, vec![1.0, 0.0]).unwrap(); 3];
        let mut g = Graph::new();
        let z = g.param(Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 1.0], vec![0.0, 0.0]]).unwrap());
        let l = cwe_loss(&mut g, z, &labels, &[0.1, 0.49, 0.0], &[2.0, 1.0], &cfg).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn single_sample_hand_composition() {
        let cfg = LossConfig::default();
        let mut y = vec![0.0; 25];
        y[0] = 1.0;
        let mut w = vec![1.0; 25];
        w[0] = rank_weight(Some(2), 2.0).unwrap();
        let mut z = vec![logit(cfg.eps_p); 25];
        z[0] = 0.0;
        let labels = vec![LabelVector::new(true, y).unwrap()];
        let mut g = Graph::new();
        let zv = g.param(Tensor::new(vec![1, 25], z).unwrap());
        let l = cwe_loss(&mut g, zv, &labels, &[0.9], &w, &cfg).unwrap();
        let expected = 2.92 * LN2 + 24.0 * bce(0.0, cfg.eps_p, cfg.eps_p);
        assert!((g.value(l).item() - expected).abs() < 1e-9);
        assert!((g.value(l).item() - 2.024).abs() < 1e-3);
    }

    #[test]
    fn graph_and_value_forms_agree() {
        let cfg = LossConfig::default();
        let labels = vec![
            LabelVector::new(true, vec![1.0, 0.0, 1.0]).unwrap(),
            LabelVector::new(false, vec![0.0; 3]).unwrap(),
        ];
        let rows = vec![vec![0.4, -2.0, 1.5], vec![-0.3, 0.2, 3.0]];
        let w = [2.92, 1.0, 2.52];
        let pv = [0.8, 0.6];
        let probs: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|&z| crate::tensor::sigmoid_scalar(z)).collect())
            .collect();
        let expect = cwe_loss_value(&labels, &probs, &pv, &w, &cfg).unwrap();
        let mut g = Graph::new();
        let z = g.param(Tensor::from_rows(&rows).unwrap());
        let l = cwe_loss(&mut g, z, &labels, &pv, &w, &cfg).unwrap();
        assert!((g.value(l).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn vul_loss_examples() {
        let cfg = LossConfig::default();
        let mut g = Graph::new();
        let z = g.param(Tensor::from_rows(&[vec![0.5, 0.5], vec![-1.0, -1.0]]).unwrap());
        let (l, _) = vul_loss(&mut g, z, &[true, false], &cfg).unwrap();
        assert!((g.value(l).item() - LN2).abs() < 1e-15);

        let z = g.param(Tensor::from_rows(&[vec![0.0, 20.0]]).unwrap());
        let (l, _) = vul_loss(&mut g, z, &[true], &cfg).unwrap();
        assert!(g.value(l).item() < 1e-6);

        let z = g.param(Tensor::from_rows(&[vec![20.0, 0.0]]).unwrap());
        let (l, _) = vul_loss(&mut g, z, &[true], &cfg).unwrap();
        assert!((g.value(l).item() + cfg.eps_p.ln()).abs() < 1e-6);
    }

    #[test]
    fn total_loss_examples() {
        let cfg = LossConfig::default();
        assert!((total_loss(0.1, 0.4, &cfg).unwrap() - 1.4).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, &cfg).unwrap(), 0.0);
        assert_eq!(total_loss(1.0, 0.0, &cfg).unwrap(), 10.0);
        let e = total_loss(f64::NAN, 0.0, &cfg).unwrap_err().to_string();
        assert!(e.contains("vulnerability"), "{e}");
        let e = total_loss(0.0, f64::INFINITY, &cfg).unwrap_err().to_string();
        assert!(e.contains("cwe"), "{e}");
    }
}
