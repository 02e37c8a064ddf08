use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn vulnmoe(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vulnmoe"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gradcheck_passes_and_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let o = vulnmoe(&["gradcheck", "--out", "g"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let r = report(&tmp.path().join("g"));
    assert_eq!(r["passed"], true);
    assert!(r["ops"].as_array().unwrap().len() >= 30);
}

#[test]
fn gradcheck_gate_fails_with_impossible_tolerance() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.json"), r#"{"gradcheck": {"op_tol": 1e-30, "end_to_end": false}}"#).unwrap();
    let o = vulnmoe(&["gradcheck", "--config", "c.json", "--out", "g"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(report(&tmp.path().join("g"))["passed"], false);
}

#[test]
fn gen_synth_is_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    for d in ["a", "b", "c"] {
        let seed = if d == "c" { "8" } else { "7" };
        assert!(vulnmoe(&["gen-synth", "--seed", seed, "--out", d], tmp.path()).status.success());
    }
    let read = |d: &str, f: &str| fs::read(tmp.path().join(d).join(f)).unwrap();
    assert_eq!(read("a", "corpus.jsonl"), read("b", "corpus.jsonl"));
    assert_eq!(read("a", "report.json"), read("b", "report.json"));
    assert_ne!(read("a", "corpus.jsonl"), read("c", "corpus.jsonl"));
}

#[test]
fn score_with_empty_findings_is_200() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(vulnmoe(&["gen-synth", "--out", "bench"], tmp.path()).status.success());
    fs::write(tmp.path().join("empty.jsonl"), "").unwrap();
    fs::write(
        tmp.path().join("c.json"),
        r#"{"score": {"benchmark": "bench/corpus.jsonl", "findings": "empty.jsonl"}}"#,
    )
    .unwrap();
    let o = vulnmoe(&["score", "--config", "c.json", "--out", "s"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let r = report(&tmp.path().join("s"));
    assert_eq!(r["total"].as_f64(), Some(200.0));
    assert_eq!(r["counts"]["tn"], 100);
    assert_eq!(r["counts"]["fn"], 150);
}

#[test]
fn paramcount_reports_deviation_for_paper_only() {
    let tmp = tempfile::tempdir().unwrap();
    let o = vulnmoe(&["paramcount", "--preset", "paper", "--out", "p"], tmp.path());
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("693019648") && text.contains("vs 693000000"), "{text}");
    let r = report(&tmp.path().join("p"));
    assert_eq!(r["reference"]["within_one_percent"], true);

    let o = vulnmoe(&["paramcount", "--preset", "ablation2", "--out", "a"], tmp.path());
    assert!(o.status.success());
    let r = report(&tmp.path().join("a"));
    assert!(r.get("reference").is_none());
    assert_eq!(r["model"]["num_routed_experts"], 50);
    assert_eq!(r["model"]["active_experts"], 2);
}

#[test]
fn invalid_preset_lists_the_choices() {
    let tmp = tempfile::tempdir().unwrap();
    let o = vulnmoe(&["paramcount", "--preset", "huge"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("huge") && e.contains("paper") && e.contains("tiny"), "{e}");
}

#[test]
fn config_errors_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.json"), r#"{"seeds": 3}"#).unwrap();
    let o = vulnmoe(&["paramcount", "--config", "c.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seeds"), "{}", stderr(&o));

    fs::write(tmp.path().join("d.json"), r#"{"score": {"benchmark": "b.jsonl"}}"#).unwrap();
    let o = vulnmoe(&["score", "--config", "d.json"], tmp.path());
    assert!(stderr(&o).contains("findings"), "{}", stderr(&o));
}

#[test]
fn malformed_corpus_line_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("bad.jsonl"),
        "{\"id\":\"a\",\"code\":\"int x;\",\"label\":\"safe\"}\n\n{\"id\":\"b\",\"code\":1}\n",
    )
    .unwrap();
    fs::write(tmp.path().join("c.json"), r#"{"dedup": {"corpus": "bad.jsonl"}}"#).unwrap();
    let o = vulnmoe(&["dedup", "--config", "c.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.jsonl:3"), "{}", stderr(&o));
}

#[test]
fn leak_gate_fails_on_a_planted_copy() {
    let tmp = tempfile::tempdir().unwrap();
    let row = |id: &str, code: &str| format!("{{\"id\":\"{id}\",\"code\":\"{code}\",\"label\":\"safe\"}}\n");
    let train = row("t0", "int add(int a, int b) { return a + b; } int main(void) { return add(1, 2); }");
    let clean = row("e0", "void copy(char *d, const char *s, size_t n) { while (n--) *d++ = *s++; }");
    fs::write(tmp.path().join("train.jsonl"), &train).unwrap();
    fs::write(tmp.path().join("clean.jsonl"), &clean).unwrap();
    fs::write(tmp.path().join("leaky.jsonl"), train.replace("t0", "e1")).unwrap();
    for (eval, code) in [("clean", 0), ("leaky", 1)] {
        let cfg = format!(r#"{{"leak": {{"train": ["train.jsonl"], "eval": "{eval}.jsonl"}}}}"#);
        fs::write(tmp.path().join("c.json"), cfg).unwrap();
        let o = vulnmoe(&["leak", "--config", "c.json", "--out", eval], tmp.path());
        assert_eq!(o.status.code(), Some(code), "{eval}: {}", stderr(&o));
    }
    assert_eq!(report(&tmp.path().join("leaky"))["flagged"][0]["eval_id"], "e1");
}

#[test]
fn tiny_pipeline_runs_end_to_end_and_reproduces() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::create_dir(dir.join("configs")).unwrap();
    let cfg = include_str!("../../../configs/tiny_pipeline.json");
    fs::write(dir.join("configs/run.json"), cfg).unwrap();
    let c = "configs/run.json";
    for (cmd, out) in [("gen-synth", "runs/toy"), ("train", "runs/train"), ("eval", "runs/eval"), ("score", "runs/score")] {
        let o = vulnmoe(&[cmd, "--config", c, "--out", out], dir);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let o = vulnmoe(&["train", "--config", c, "--out", "runs/train2"], dir);
    assert!(o.status.success());
    let a = fs::read(dir.join("runs/train/report.json")).unwrap();
    let b = fs::read(dir.join("runs/train2/report.json")).unwrap();
    assert_eq!(a, b);
    let stages = report(&dir.join("runs/train"))["stages"].as_array().unwrap().len();
    assert_eq!(stages, 3);
    let eval = report(&dir.join("runs/eval"));
    let score = report(&dir.join("runs/score"));
    assert_eq!(eval["castle"]["total"], score["total"]);
    assert!(!eval["sweep"]["points"].as_array().unwrap().is_empty());
    assert!(dir.join("runs/eval/per_cwe.csv").exists());
}
