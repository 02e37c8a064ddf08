use std::collections::BTreeSet;

use proptest::prelude::*;
use vulnmoe::corpus::Label;
use vulnmoe::cwe::{CweId, DEFAULT_HIERARCHY};
use vulnmoe::eval::{
    binary_metrics, castle_score, per_cwe_metrics, sample_score, threshold_grid, threshold_sweep, BenchmarkSample,
    BinaryMetrics, BonusTable, Branch, Confusion, CweRecord, EvalError, Hierarchy, Prediction, ToolResult,
};
use vulnmoe::loss::default_rank_table;
use vulnmoe::synth;

fn bench(id: &str, vul: bool, cwe: u32) -> BenchmarkSample {
    BenchmarkSample {
        id: id.into(),
        label: if vul { Label::Vulnerable } else { Label::Safe },
        cwe: Some(CweId(cwe)),
    }
}

fn set(ids: &[u32]) -> BTreeSet<CweId> {
    ids.iter().map(|&n| CweId(n)).collect()
}

fn standard() -> Vec<BenchmarkSample> {
    synth::benchmark(42).iter().map(BenchmarkSample::from).collect()
}

#[test]
fn empty_tool_on_standard_composition_scores_200() {
    let b = standard();
    assert_eq!(b.len(), 250);
    assert_eq!(b.iter().filter(|s| s.label.is_vulnerable()).count(), 150);
    let bonus = BonusTable::from_ranks(&default_rank_table());
    let r = castle_score(&b, &ToolResult::new(), &bonus, &Hierarchy::default()).unwrap();
    assert_eq!(r.total, 200.0);
    assert_eq!((r.counts.tp, r.counts.fp, r.counts.tn, r.counts.fn_), (0, 0, 100, 150));
}

#[test]
fn reconstructed_headline_arithmetic() {
    // 136 single-finding detections (125 of them carrying a 2-point bonus),
    // 14 misses, 77 silent safe samples, 16 safe samples with one finding
    let mut b = Vec::new();
    let mut tool = ToolResult::new();
    for i in 0..136 {
        let cwe = if i < 125 { 787 } else { 999 };
        let id = format!("v{i}");
        b.push(bench(&id, true, cwe));
        tool.insert(id, set(&[cwe]));
    }
    for i in 0..14 {
        b.push(bench(&format!("m{i}"), true, 787));
    }
    for i in 0..77 {
        b.push(bench(&format!("s{i}"), false, 787));
    }
    for i in 0..16 {
        let id = format!("f{i}");
        b.push(bench(&id, false, 787));
        tool.insert(id, set(&[787]));
    }
    let bonus = BonusTable::new([(CweId(787), 2.0)]).unwrap();
    let r = castle_score(&b, &tool, &bonus, &Hierarchy::default()).unwrap();
    assert_eq!(r.total_bonus, 250.0);
    assert_eq!(r.total, 1068.0);
    assert_eq!(r.total, 136.0 * 5.0 + 77.0 * 2.0 - 16.0 + 250.0);
}

#[test]
fn each_branch_on_constructed_fixtures() {
    let bonus = BonusTable::new([(CweId(787), 1.92), (CweId(119), 0.5)]).unwrap();
    let h = Hierarchy::parse(DEFAULT_HIERARCHY).unwrap();
    let v = bench("a", true, 787);

    let s = sample_score(&v, &set(&[787]), &bonus, &h);
    assert_eq!((s.branch, s.score), (Branch::Detected, 5.0 + 1.92));
    let s = sample_score(&v, &set(&[787, 89, 22]), &bonus, &h);
    assert_eq!(s.score, 5.0 - 3.0 + 1.0 + 1.92);
    // parent match through the hierarchy earns the parent's bonus
    let s = sample_score(&v, &set(&[119]), &bonus, &h);
    assert_eq!((s.branch, s.matched, s.score), (Branch::Detected, Some(CweId(119)), 5.0 + 0.5));
    // both a parent and the exact id: the larger bonus, once
    let s = sample_score(&v, &set(&[119, 787]), &bonus, &h);
    assert_eq!(s.score, 5.0 - 2.0 + 1.0 + 1.92);

    let s = sample_score(&bench("b", false, 787), &set(&[]), &bonus, &h);
    assert_eq!((s.branch, s.score), (Branch::CorrectSilence, 2.0));

    let s = sample_score(&bench("c", false, 787), &set(&[787, 22]), &bonus, &h);
    assert_eq!((s.branch, s.score), (Branch::Otherwise, -2.0));
    let s = sample_score(&v, &set(&[89, 22]), &bonus, &h);
    assert_eq!((s.branch, s.score), (Branch::Otherwise, -2.0));
    let s = sample_score(&v, &set(&[]), &bonus, &h);
    assert_eq!((s.branch, s.score), (Branch::Otherwise, 0.0));
}

#[test]
fn hierarchy_matching_is_one_step() {
    let mut h = Hierarchy::default();
    h.add_edge(CweId(1), CweId(2));
    h.add_edge(CweId(2), CweId(3));
    assert!(h.matches(CweId(2), CweId(3)));
    assert!(h.matches(CweId(3), CweId(2)));
    assert!(!h.matches(CweId(1), CweId(3)));
    assert!(matches!(Hierarchy::parse("1,2\n2,3\n3,1\n"), Err(EvalError::Cycle)));
    assert!(matches!(Hierarchy::parse("1,2\nbad\n"), Err(EvalError::Parse { line: 2, .. })));
}

#[test]
fn unknown_ids_are_listed() {
    let b = vec![bench("a", true, 787)];
    let mut tool = ToolResult::new();
    tool.insert("zzz".into(), set(&[787]));
    let e = castle_score(&b, &tool, &BonusTable::default(), &Hierarchy::default()).unwrap_err();
    assert!(matches!(e, EvalError::UnknownIds(ref ids) if ids == &["zzz".to_string()]));
}

#[test]
fn bonus_table_rejects_negative_points() {
    assert!(BonusTable::new([(CweId(1), -0.5)]).is_err());
    assert!(BonusTable::parse("CWE-787,1.5\nCWE-22,x\n").is_err());
    let t = BonusTable::parse("# top\nCWE-787,1.5\n").unwrap();
    assert_eq!(t.get(CweId(787)), 1.5);
    assert_eq!(t.get(CweId(1)), 0.0);
    let d = BonusTable::from_ranks(&default_rank_table());
    assert!((d.get(CweId(787)) - 1.92).abs() < 1e-12);
}

/// Direct transcription of the per-sample rule with exact-id matching.
fn oracle(vul: bool, truth: u32, findings: &BTreeSet<CweId>, bonus: &BonusTable) -> f64 {
    let n = findings.len() as f64;
    if vul && findings.contains(&CweId(truth)) {
        return 5.0 - n + 1.0 + bonus.get(CweId(truth));
    }
    if !vul && findings.is_empty() {
        return 2.0;
    }
    -n
}

fn arb_case() -> impl Strategy<Value = Vec<(bool, u32, Vec<u32>)>> {
    proptest::collection::vec((any::<bool>(), 1u32..6, proptest::collection::vec(1u32..6, 0..4)), 0..30)
}

proptest! {
    #[test]
    fn total_matches_oracle_and_decomposes(case in arb_case(), split in 0usize..30) {
        let bonus = BonusTable::new((1..6).map(|c| (CweId(c), c as f64 * 0.3))).unwrap();
        let h = Hierarchy::default();
        let b: Vec<BenchmarkSample> = case.iter().enumerate().map(|(i, (v, c, _))| bench(&i.to_string(), *v, *c)).collect();
        let tool: ToolResult = case.iter().enumerate().map(|(i, (_, _, f))| (i.to_string(), set(f))).collect();
        let r = castle_score(&b, &tool, &bonus, &h).unwrap();
        let want: f64 = case.iter().map(|(v, c, f)| oracle(*v, *c, &set(f), &bonus)).sum();
        prop_assert!((r.total - want).abs() < 1e-9);

        let k = split.min(b.len());
        let part = |lo: usize, hi: usize| {
            let sub = &b[lo..hi];
            let t: ToolResult = tool.iter().filter(|(id, _)| sub.iter().any(|s| &s.id == *id)).map(|(a, c)| (a.clone(), c.clone())).collect();
            castle_score(sub, &t, &bonus, &h).unwrap().total
        };
        prop_assert!((part(0, k) + part(k, b.len()) - r.total).abs() < 1e-9);

        for (s, (_, _, f)) in r.samples.iter().zip(&case) {
            let n = set(f).len() as f64;
            prop_assert!(s.score.score >= -n);
            prop_assert!(s.score.score <= 6.0 + bonus.max());
        }
    }

    #[test]
    fn binary_metrics_match_brute_force(
        rows in proptest::collection::vec((any::<bool>(), 0.0f64..=1.0), 1..60),
        t in 0.0f64..=1.0,
    ) {
        let labels: Vec<bool> = rows.iter().map(|r| r.0).collect();
        let probs: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let m = binary_metrics(&labels, &probs, t).unwrap();
        let count = |y: bool, p: bool| rows.iter().filter(|r| r.0 == y && (r.1 >= t) == p).count() as f64;
        let (tp, fp, tn, fn_) = (count(true, true), count(false, true), count(false, false), count(true, false));
        let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rec = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if tp > 0.0 { 2.0 * tp / (2.0 * tp + fp + fn_) } else { 0.0 };
        prop_assert!((m.accuracy - (tp + tn) / rows.len() as f64).abs() < 1e-12);
        prop_assert!((m.precision - prec).abs() < 1e-12);
        prop_assert!((m.recall - rec).abs() < 1e-12);
        prop_assert!((m.f1 - f1).abs() < 1e-12);
        prop_assert_eq!(m.precision_undefined, tp + fp == 0.0);
    }
}

#[test]
fn headline_confusion_counts() {
    let m = BinaryMetrics::from_confusion(Confusion { tp: 129, fp: 23, tn: 77, fn_: 21 });
    assert!((m.f1 - 0.8543).abs() <= 0.0005);
    assert!((m.accuracy - 0.824).abs() < 1e-12);
    assert!((m.recall - 0.86).abs() < 1e-12);
    assert!((m.precision - 0.8487).abs() < 5e-5);
}

#[test]
fn metrics_reject_bad_inputs() {
    assert!(binary_metrics(&[true], &[0.5, 0.1], 0.5).is_err());
    assert!(binary_metrics(&[true], &[1.5], 0.5).is_err());
    assert!(binary_metrics(&[true], &[f64::NAN], 0.5).is_err());
    let m = binary_metrics(&[true, false], &[0.5, 0.49], 0.5).unwrap();
    assert_eq!(m.confusion, Confusion { tp: 1, fp: 0, tn: 1, fn_: 0 });
}

#[test]
fn per_cwe_table_and_macro_average() {
    let r = |c: u32, truth: bool, predicted: bool| CweRecord { cwe: CweId(c), truth, predicted };
    let recs = [r(787, true, true), r(787, false, true), r(22, true, false), r(22, true, true)];
    let t = per_cwe_metrics(&recs, &[CweId(787), CweId(22), CweId(89)]);
    assert_eq!(t.rows.len(), 2);
    let f787 = 2.0 * 0.5 * 1.0 / 1.5;
    let f22 = 2.0 * 1.0 * 0.5 / 1.5;
    assert!((t.macro_f1 - (f787 + f22) / 2.0).abs() < 1e-12);
    let csv = t.to_csv();
    assert!(csv.starts_with("cwe,samples,tp,fp,tn,fn,precision,recall,f1\n"));
    assert!(csv.contains("CWE-22,2,1,0,0,1,1.0000,0.5000,0.6667"));
    assert!(csv.trim_end().ends_with("macro,,,,,,0.7500,0.7500,0.6667"));
}

#[test]
fn sweep_reports_every_threshold_and_deviation() {
    let b = standard();
    let preds: Vec<Prediction> = b
        .iter()
        .enumerate()
        .map(|(i, s)| Prediction {
            p_vul: ((i * 37) % 100) as f64 / 100.0,
            cwe: if i % 3 == 0 { s.cwe } else { Some(CweId(787)) },
        })
        .collect();
    let grid = threshold_grid(0.3, 0.7, 0.05).unwrap();
    assert_eq!(grid.len(), 9);
    assert!(grid.contains(&0.45));
    let bonus = BonusTable::from_ranks(&default_rank_table());
    let h = Hierarchy::parse(DEFAULT_HIERARCHY).unwrap();
    let r = threshold_sweep(&b, &preds, &bonus, &h, &grid, 0.5).unwrap();
    assert_eq!(r.points.len(), grid.len());
    let at = |t: f64| r.points.iter().find(|p| p.threshold == t).unwrap();
    assert_eq!(at(0.5).castle, r.reference_castle);
    let dev = r.points.iter().map(|p| (p.castle - r.reference_castle).abs()).fold(0.0, f64::max);
    assert_eq!(r.max_castle_deviation, dev);
    let fdev = r.points.iter().map(|p| (p.f1 - r.reference_f1).abs()).fold(0.0, f64::max);
    assert_eq!(r.max_f1_deviation, fdev);
    assert!(threshold_grid(0.5, 0.4, 0.1).is_err());
    assert!(threshold_sweep(&b[..3], &preds, &bonus, &h, &grid, 0.5).is_err());
}
