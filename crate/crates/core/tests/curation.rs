use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use vulnmoe::corpus::{parse_jsonl, Label, Sample};
use vulnmoe::curation::{
    agreement_decide, repair_loop, Decision, Fault, FormalVerdict, FormalVerifier, IdentityRepair, Intent,
    LlmVerdict, LlmVerifier, LoopStatus, Repairer, ScriptLine, ScriptedVerifier, DEFAULT_MAX_ITERS,
};
use vulnmoe::curation::{dedup, exact_jaccard, leakage_check, shingles, CurationError, MinHashConfig, MinHasher};
use vulnmoe::cwe::CweId;
use vulnmoe::rng::substream;

/// Independent statement of the acceptance rule.
fn expected(formal: FormalVerdict, llm: Option<LlmVerdict>, intent: Intent) -> Option<Decision> {
    use FormalVerdict as F;
    use LlmVerdict as L;
    match (formal, llm, intent) {
        (F::Timeout | F::CompileError, _, _) => Some(Decision::Repair),
        (_, None, _) => None,
        (F::ViolationDetected, Some(L::VulnerableViolationDetected), Intent::Vulnerable) => Some(Decision::Accept),
        (F::VerificationSuccess, Some(L::SafeVerificationSuccess), Intent::Safe) => Some(Decision::Accept),
        _ => Some(Decision::Discard),
    }
}

#[test]
fn full_truth_table() {
    let llms: Vec<Option<LlmVerdict>> = std::iter::once(None).chain(LlmVerdict::ALL.map(Some)).collect();
    let mut rows = 0;
    for intent in [Intent::Vulnerable, Intent::Safe] {
        let mut accepts = 0;
        for f in FormalVerdict::ALL {
            for &l in &llms {
                rows += 1;
                let got = agreement_decide(f, l, intent);
                match expected(f, l, intent) {
                    Some(d) => {
                        let got = got.unwrap();
                        assert_eq!(got.decision, d, "{f:?} {l:?} {intent:?}");
                        assert!(!got.reason.is_empty());
                        accepts += usize::from(d == Decision::Accept);
                    }
                    None => assert!(matches!(got, Err(CurationError::Protocol(_))), "{f:?} {intent:?}"),
                }
            }
        }
        assert_eq!(accepts, 1);
    }
    assert_eq!(rows, 40);
    // one Accept per intent, two per intent across the decisive pair of formal verdicts
    let accepts: usize = [Intent::Vulnerable, Intent::Safe]
        .iter()
        .flat_map(|&i| FormalVerdict::ALL.map(move |f| (f, i)))
        .flat_map(|(f, i)| LlmVerdict::ALL.map(move |l| (f, l, i)))
        .filter(|&(f, l, i)| agreement_decide(f, Some(l), i).unwrap().decision == Decision::Accept)
        .count();
    assert_eq!(accepts, 2);
}

#[test]
fn verdict_strings_round_trip() {
    for v in LlmVerdict::ALL {
        assert_eq!(v.as_str().parse::<LlmVerdict>().unwrap(), v);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, format!("\"{}\"", v.as_str()));
    }
    assert!("vulnerable".parse::<LlmVerdict>().is_err());
    let f: FormalVerdict = serde_json::from_str("\"ViolationDetected\"").unwrap();
    assert_eq!(f, FormalVerdict::ViolationDetected);
}

fn line(id: &str, it: usize, formal: FormalVerdict, llm: Option<LlmVerdict>) -> ScriptLine {
    ScriptLine { sample_id: id.into(), iteration: it, formal, llm }
}

fn run(script: Vec<ScriptLine>, intent: Intent) -> vulnmoe::curation::RepairOutcome {
    let mut formal = ScriptedVerifier::new(script.clone());
    let mut llm = ScriptedVerifier::new(script);
    repair_loop("s", "int main(){}", intent, &mut formal, &mut llm, &mut IdentityRepair, DEFAULT_MAX_ITERS)
}

#[test]
fn repair_loop_accepts_on_second_attempt() {
    let out = run(
        vec![
            line("s", 1, FormalVerdict::CompileError, None),
            line("s", 2, FormalVerdict::ViolationDetected, Some(LlmVerdict::VulnerableViolationDetected)),
        ],
        Intent::Vulnerable,
    );
    assert_eq!((out.decision(), out.iterations), (Some(Decision::Accept), 2));
}

#[test]
fn repair_loop_gives_up_after_five() {
    let out = run(vec![line("s", 1, FormalVerdict::Timeout, None)], Intent::Safe);
    assert_eq!((out.decision(), out.iterations), (Some(Decision::Discard), 5));
}

#[test]
fn disagreement_is_never_repaired() {
    let out = run(
        vec![line("s", 1, FormalVerdict::VerificationSuccess, Some(LlmVerdict::SafeIssuesFound))],
        Intent::Safe,
    );
    assert_eq!((out.decision(), out.iterations), (Some(Decision::Discard), 1));
}

struct Failing;

impl FormalVerifier for Failing {
    fn verify(&mut self, _: &str, _: &str, it: usize) -> Result<FormalVerdict, Fault> {
        if it < 3 {
            Ok(FormalVerdict::Timeout)
        } else {
            Err(Fault("solver crashed".into()))
        }
    }
}

impl LlmVerifier for Failing {
    fn judge(&mut self, _: &str, _: &str, _: usize) -> Result<Option<LlmVerdict>, Fault> {
        Ok(None)
    }
}

struct Appender(usize);

impl Repairer for Appender {
    fn repair(&mut self, _: &str, code: &str, _: usize) -> Result<String, Fault> {
        self.0 += 1;
        Ok(format!("{code}\n/* fix {} */", self.0))
    }
}

#[test]
fn verifier_fault_quarantines_with_diagnostic() {
    let mut repairer = Appender(0);
    let out = repair_loop("q", "x", Intent::Vulnerable, &mut Failing, &mut Failing, &mut repairer, 5);
    assert_eq!(out.iterations, 3);
    assert_eq!(repairer.0, 2);
    assert!(out.final_code.ends_with("/* fix 2 */"));
    match out.status {
        LoopStatus::Quarantined { diagnostic } => assert!(diagnostic.contains("solver crashed") && diagnostic.contains('3')),
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_llm_verdict_quarantines() {
    let out = run(vec![line("s", 1, FormalVerdict::ViolationDetected, None)], Intent::Vulnerable);
    assert!(matches!(out.status, LoopStatus::Quarantined { .. }));
}

#[test]
fn script_lines_parse_from_jsonl() {
    let text = r#"{"sample_id":"a","iteration":1,"formal":"timeout"}
{"sample_id":"a","iteration":2,"formal":"VerificationSuccess","llm":"Safe Code: Verification Success"}"#;
    let lines: Vec<ScriptLine> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let mut f = ScriptedVerifier::new(lines.clone());
    let mut l = ScriptedVerifier::new(lines);
    let out = repair_loop("a", "", Intent::Safe, &mut f, &mut l, &mut IdentityRepair, 5);
    assert_eq!((out.decision(), out.iterations), (Some(Decision::Accept), 2));
    assert!(serde_json::from_str::<ScriptLine>(r#"{"sample_id":"a","iteration":1,"formal":"timeout","x":1}"#).is_err());
}

#[test]
fn minhash_error_is_within_bound_over_200_pairs() {
    let hasher = MinHasher::new(MinHashConfig::default(), 42).unwrap();
    let mut rng = substream(42, "pairs");
    let mut total = 0.0;
    for i in 0..200 {
        let size = rng.random_range(40..200usize);
        let target = i as f64 / 199.0;
        let shared = (target * size as f64).round() as usize;
        let mut pool: Vec<u64> = (0..2 * size as u64).map(|x| x * 1_000_003 + i).collect();
        pool.shuffle(&mut rng);
        let common: BTreeSet<u64> = pool[..shared].iter().copied().collect();
        let mut a = common.clone();
        let mut b = common;
        a.extend(&pool[shared..size]);
        b.extend(&pool[size..2 * size - shared]);
        let exact = exact_jaccard(&a, &b);
        let est = hasher.from_shingles(&a).unwrap().jaccard(&hasher.from_shingles(&b).unwrap()).unwrap();
        total += (est - exact).abs();
    }
    let mae = total / 200.0;
    assert!(mae <= 2.0 / (128f64).sqrt(), "mae {mae}");
}

#[test]
fn signatures_from_different_seeds_are_incompatible() {
    let a = MinHasher::new(MinHashConfig::default(), 1).unwrap().signature("int a = 1 ;").unwrap();
    let b = MinHasher::new(MinHashConfig::default(), 2).unwrap().signature("int a = 1 ;").unwrap();
    assert!(matches!(a.jaccard(&b), Err(CurationError::Incompatible)));
    let h = MinHasher::new(MinHashConfig::default(), 1).unwrap();
    assert!(matches!(h.signature("  /* only a comment */ "), Err(CurationError::EmptyText)));
}

fn random_code(rng: &mut vulnmoe::rng::Rng) -> String {
    const WORDS: &[&str] = &["a", "b", "c", "d", "buf", "len", "i", "j", "p", "q", "n", "m"];
    const OPS: &[&str] = &["=", "+=", "-=", "*="];
    (0..40)
        .map(|_| {
            format!(
                "{} {} {} + {} ;",
                WORDS[rng.random_range(0..WORDS.len())],
                OPS[rng.random_range(0..OPS.len())],
                WORDS[rng.random_range(0..WORDS.len())],
                rng.random_range(0..1000),
            )
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn sample(id: String, code: String, cwe: u32) -> Sample {
    Sample { id, code, label: Label::Vulnerable, cwe: Some(CweId(cwe)), source: "test".into() }
}

fn planted() -> Vec<Sample> {
    let mut rng = substream(9, "planted");
    let mut corpus: Vec<Sample> = (0..100).map(|i| sample(format!("u{i:03}"), random_code(&mut rng), 787)).collect();
    for k in 0..10 {
        let src = &corpus[k * 7];
        let code = format!("{} z = 1 ;", src.code);
        corpus.push(sample(format!("c{k}"), code, 787));
    }
    corpus
}

#[test]
fn dedup_removes_every_planted_clone() {
    let hasher = MinHasher::new(MinHashConfig::default(), 42).unwrap();
    let corpus = planted();
    for k in 0..10 {
        let cfg = MinHashConfig::default();
        let a = shingles(&corpus[k * 7].code, cfg.ngram, false);
        let b = shingles(&corpus[100 + k].code, cfg.ngram, false);
        assert!(exact_jaccard(&a, &b) >= 0.85);
    }
    let (kept, report) = dedup(&corpus, &hasher, 0.85);
    let removed: BTreeSet<&str> = report.removals.iter().map(|r| r.removed.as_str()).collect();
    let clones: BTreeSet<String> = (0..10).map(|k| format!("c{k}")).collect();
    assert_eq!(removed, clones.iter().map(String::as_str).collect());
    assert_eq!(kept.len(), 100);
    for r in &report.removals {
        let k: usize = r.removed[1..].parse().unwrap();
        assert_eq!(r.kept, format!("u{:03}", k * 7));
    }
    let (again, report2) = dedup(&kept, &hasher, 0.85);
    assert_eq!(again, kept);
    assert!(report2.removals.is_empty());
}

#[test]
fn dedup_never_crosses_groups() {
    let hasher = MinHasher::new(MinHashConfig::default(), 42).unwrap();
    let code = "int a = 1 ; a ++ ; return a ;".to_string();
    let mut corpus = vec![sample("x".into(), code.clone(), 787), sample("y".into(), code.clone(), 22)];
    let mut safe = sample("z".into(), code, 787);
    safe.label = Label::Safe;
    corpus.push(safe);
    let (kept, _) = dedup(&corpus, &hasher, 0.85);
    assert_eq!(kept.len(), 3);
}

#[test]
fn leakage_flags_verbatim_copy_only() {
    let hasher = MinHasher::new(MinHashConfig::default(), 42).unwrap();
    let mut rng = substream(3, "leak");
    let train: Vec<Sample> = (0..30).map(|i| sample(format!("t{i}"), random_code(&mut rng), 787)).collect();
    let mut eval: Vec<Sample> = (0..20).map(|i| sample(format!("e{i}"), random_code(&mut rng), 787)).collect();
    let before = (train.clone(), eval.clone());
    let clean = leakage_check(&train, &eval, &hasher, 0.35);
    assert!(clean.passed && clean.flagged.is_empty());
    assert_eq!(clean.rows.len(), 20);
    assert_eq!((train.clone(), eval.clone()), before);

    eval.push(sample("leak".into(), train[17].code.clone(), 787));
    let r = leakage_check(&train, &eval, &hasher, 0.35);
    assert!(!r.passed);
    assert_eq!(r.flagged.len(), 1);
    assert_eq!(r.flagged[0].eval_id, "leak");
    assert_eq!(r.flagged[0].nearest_train_id.as_deref(), Some("t17"));
    assert_eq!(r.flagged[0].max_similarity, 1.0);
}

#[test]
fn renamed_clones_need_identifier_normalization() {
    let plain = MinHasher::new(MinHashConfig::default(), 1).unwrap();
    let norm = MinHasher::new(MinHashConfig { normalize_identifiers: true, ..Default::default() }, 1).unwrap();
    let a = "int f(int x) { int y = x + 1; if (y > 10) { return g(y); } return y * 2; }";
    let b = "int h(int u) { int v = u + 1; if (v > 10) { return k(v); } return v * 2; }";
    let sim = |h: &MinHasher| h.signature(a).unwrap().jaccard(&h.signature(b).unwrap()).unwrap();
    assert!(sim(&norm) > 0.99);
    assert!(sim(&plain) < 0.5);
}

#[test]
fn corpus_parse_errors_carry_line_numbers() {
    let text = "{\"id\":\"a\",\"code\":\"x\",\"label\":\"safe\",\"source\":\"s\"}\n{\"id\":\"b\",\"code\":\"x\"}\n";
    let e = parse_jsonl::<Sample>(text, "mem").unwrap_err().to_string();
    assert!(e.starts_with("mem:2:"), "{e}");
    assert!(e.contains("label"), "{e}");
}
