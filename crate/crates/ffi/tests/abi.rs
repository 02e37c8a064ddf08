use std::ffi::{c_char, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use vulnmoe::model::{save_checkpoint, Model, ModelConfig};
use vulnmoe::rng::substream;
use vulnmoe_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    let n = unsafe { vm_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(511)].iter().map(|&b| b as u8).collect();
    String::from_utf8(bytes).unwrap()
}

#[test]
fn paramcount_matches_library() {
    let (mut t, mut a) = (0u64, 0u64);
    assert_eq!(unsafe { vm_paramcount(c("tiny").as_ptr(), &mut t, &mut a) }, VmStatus::Ok);
    assert_eq!((t, a), (2214, 1446));
    assert_eq!(unsafe { vm_paramcount(c("nope").as_ptr(), &mut t, &mut a) }, VmStatus::InvalidArgument);
    let e = last_error();
    assert!(e.contains("nope") && e.contains("paper"), "{e}");
}

#[test]
fn null_pointers_are_rejected() {
    let mut t = 0u64;
    assert_eq!(unsafe { vm_paramcount(ptr::null(), &mut t, &mut t) }, VmStatus::NullPointer);
    assert_eq!(unsafe { vm_paramcount(c("tiny").as_ptr(), ptr::null_mut(), &mut t) }, VmStatus::NullPointer);
    assert_eq!(unsafe { vm_rank_weight(2, 2.0, ptr::null_mut()) }, VmStatus::NullPointer);
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { vm_model_load(ptr::null(), &mut m) }, VmStatus::NullPointer);
    assert!(m.is_null());
    unsafe { vm_model_free(ptr::null_mut()) };
}

#[test]
fn invalid_utf8_is_reported() {
    let raw = [0xffu8, 0xfe, 0];
    let mut t = 0u64;
    let s = unsafe { vm_paramcount(raw.as_ptr().cast(), &mut t, &mut t) };
    assert_eq!(s, VmStatus::InvalidUtf8);
}

#[test]
fn rank_weights() {
    let mut w = 0.0;
    for (rank, want) in [(2, 2.92), (7, 2.52), (0, 1.0), (30, 1.0)] {
        assert_eq!(unsafe { vm_rank_weight(rank, 2.0, &mut w) }, VmStatus::Ok);
        assert!((w - want).abs() < 1e-12, "rank {rank}: {w}");
    }
}

#[test]
fn binary_metrics_from_arrays() {
    let labels = [1u8, 1, 0, 0];
    let probs = [0.9, 0.2, 0.7, 0.1];
    let mut m = VmBinaryMetrics::default();
    assert_eq!(unsafe { vm_binary_metrics(labels.as_ptr(), probs.as_ptr(), 4, 0.5, &mut m) }, VmStatus::Ok);
    assert_eq!((m.tp, m.fp, m.tn, m.fn_), (1, 1, 1, 1));
    assert!((m.f1 - 0.5).abs() < 1e-12);
    let s = unsafe { vm_binary_metrics(labels.as_ptr(), probs.as_ptr(), 4, f64::NAN, &mut m) };
    assert_eq!(s, VmStatus::InvalidArgument);
}

#[test]
fn agreement_matches_truth_table_and_protocol_errors() {
    let mut d = VmDecision::Discard;
    let call = |f, l, i, d: &mut VmDecision| unsafe { vm_agreement_decide(f, l, i, d) };
    assert_eq!(call(VmFormal::ViolationDetected, VmLlm::VulnerableViolationDetected, VmIntent::Vulnerable, &mut d), VmStatus::Ok);
    assert_eq!(d, VmDecision::Accept);
    assert_eq!(call(VmFormal::VerificationSuccess, VmLlm::SafeVerificationSuccess, VmIntent::Safe, &mut d), VmStatus::Ok);
    assert_eq!(d, VmDecision::Accept);
    assert_eq!(call(VmFormal::CompileError, VmLlm::Absent, VmIntent::Safe, &mut d), VmStatus::Ok);
    assert_eq!(d, VmDecision::Repair);
    assert_eq!(call(VmFormal::ViolationDetected, VmLlm::SafeIssuesFound, VmIntent::Vulnerable, &mut d), VmStatus::Ok);
    assert_eq!(d, VmDecision::Discard);
    assert_eq!(call(VmFormal::ViolationDetected, VmLlm::Absent, VmIntent::Vulnerable, &mut d), VmStatus::InvalidArgument);
    assert!(last_error().contains("protocol"));
}

#[test]
fn castle_score_over_strings() {
    let bench = c(&vulnmoe::corpus::to_jsonl(&vulnmoe::synth::benchmark(1)));
    let mut total = 0.0;
    assert_eq!(unsafe { vm_castle_score(bench.as_ptr(), c("").as_ptr(), &mut total) }, VmStatus::Ok);
    assert_eq!(total, 200.0);
    let bad = c("{\"id\":\"x\"}\n{oops\n");
    assert_eq!(unsafe { vm_castle_score(bench.as_ptr(), bad.as_ptr(), &mut total) }, VmStatus::Parse);
    assert!(last_error().contains(":1:") || last_error().contains("line"), "{}", last_error());
}

#[test]
fn minhash_similarity() {
    let a = c("int f(int x) { int y = x + 1; return y * 2; } int g(void) { return f(3); }");
    let (mut est, mut ex) = (0.0, 0.0);
    assert_eq!(unsafe { vm_minhash_similarity(a.as_ptr(), a.as_ptr(), 1, &mut est, &mut ex) }, VmStatus::Ok);
    assert_eq!((est, ex), (1.0, 1.0));
    let b = c("void h(char *p) { while (*p) { p++; } puts(\"done\"); }");
    assert_eq!(unsafe { vm_minhash_similarity(a.as_ptr(), b.as_ptr(), 1, &mut est, &mut ex) }, VmStatus::Ok);
    assert!(ex < 0.2 && (est - ex).abs() <= 2.0 / 128f64.sqrt(), "{est} {ex}");
}

#[test]
fn model_handle_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(ModelConfig::tiny(), &mut substream(3, "init")).unwrap();
    save_checkpoint(dir.path(), &model, &Default::default()).unwrap();
    let path = c(dir.path().to_str().unwrap());
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { vm_model_load(path.as_ptr(), &mut h) }, VmStatus::Ok);
    assert!(!h.is_null());
    let (mut p, mut cwe) = (0.0, 0u32);
    let code = c("strcpy ( d , s ) ;");
    assert_eq!(unsafe { vm_model_predict(h, code.as_ptr(), &mut p, &mut cwe) }, VmStatus::Ok);
    assert!((0.0..=1.0).contains(&p));
    assert!(vulnmoe::cwe::CASTLE_CWES.contains(&cwe));
    let (mut p2, mut cwe2) = (0.0, 0u32);
    assert_eq!(unsafe { vm_model_predict(h, code.as_ptr(), &mut p2, &mut cwe2) }, VmStatus::Ok);
    assert_eq!((p.to_bits(), cwe), (p2.to_bits(), cwe2));
    unsafe { vm_model_free(h) };

    let missing = c(dir.path().join("absent").to_str().unwrap());
    assert_ne!(unsafe { vm_model_load(missing.as_ptr(), &mut h) }, VmStatus::Ok);
    assert!(h.is_null());
}

#[test]
fn errors_are_thread_local() {
    let mut t = 0u64;
    assert_ne!(unsafe { vm_paramcount(c("nope").as_ptr(), &mut t, &mut t) }, VmStatus::Ok);
    let other = std::thread::spawn(last_error).join().unwrap();
    assert!(other.is_empty());
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { vm_paramcount(c("tiny").as_ptr(), &mut t, &mut t) }, VmStatus::Ok);
    assert!(last_error().is_empty());
}

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let lib = target_dir().join("libvulnmoe_ffi.a");
    assert!(lib.exists(), "static library not built at {}", lib.display());
    let tmp = tempfile::tempdir().unwrap();
    let bin = tmp.path().join("smoke");
    let status = Command::new("cc")
        .arg(root.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(root.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("a C compiler is on PATH");
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("smoke: ok"));
}
