//! C ABI over the `vulnmoe` library.
//!
//! Every function returns a [`VmStatus`]. On failure a message is kept in
//! thread-local storage and can be copied out with [`vm_last_error`].
//! Strings passed in are NUL-terminated UTF-8; out-pointers must be valid.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use vulnmoe::corpus::parse_jsonl;
use vulnmoe::curation::{
    agreement_decide, exact_jaccard, shingles, Decision, FormalVerdict, Intent, LlmVerdict, MinHashConfig, MinHasher,
};
use vulnmoe::cwe::{CweId, DEFAULT_HIERARCHY};
use vulnmoe::eval::{
    binary_metrics, castle_score, tool_result, BenchmarkSample, BonusTable, FindingsRecord, Hierarchy,
};
use vulnmoe::harness::commands::checkpoint_settings;
use vulnmoe::loss::{default_rank_table, rank_weight};
use vulnmoe::model::tokenizer::Tokenizer;
use vulnmoe::model::{count_parameters, load_checkpoint, Batch, Model, ModelConfig};
use vulnmoe::train::encode_truncated;

/// Status codes shared by all entry points.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Parse = 4,
    Io = 5,
    Model = 6,
    Panic = 7,
}

/// Formal verifier verdicts.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VmFormal {
    ViolationDetected = 0,
    VerificationSuccess = 1,
    Timeout = 2,
    CompileError = 3,
}

/// Language-model verifier verdicts. `Absent` means no verdict was returned.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VmLlm {
    VulnerableViolationDetected = 0,
    SafeVerificationSuccess = 1,
    SafeIssuesFound = 2,
    VulnerableNoViolation = 3,
    Absent = 4,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VmIntent {
    Vulnerable = 0,
    Safe = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VmDecision {
    Accept = 0,
    Discard = 1,
    Repair = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VmBinaryMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

/// Loaded checkpoint plus the tokenizer it was trained with.
pub struct VmModel {
    model: Model,
    tokenizer: Box<dyn Tokenizer>,
    classes: Vec<CweId>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(VmStatus, String);

impl Failure {
    fn new(status: VmStatus, msg: impl ToString) -> Self {
        Failure(status, msg.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VmStatus {
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => (VmStatus::Ok, String::new()),
        Ok(Err(Failure(s, m))) => (s, m),
        Err(p) => {
            let m = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            (VmStatus::Panic, m)
        }
    };
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
    status
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(VmStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure::new(VmStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure::new(VmStatus::NullPointer, format!("{what} is null")))
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length
/// in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn vm_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Analytic total and active parameter counts for a named preset.
///
/// # Safety
/// `preset` must be a valid C string; `total` and `active` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn vm_paramcount(preset: *const c_char, total: *mut u64, active: *mut u64) -> VmStatus {
    guard(|| {
        let name = text(preset, "preset")?;
        let cfg = ModelConfig::preset(name).map_err(|e| Failure::new(VmStatus::InvalidArgument, e))?;
        let c = count_parameters(&cfg);
        *out(total, "total")? = c.total;
        *out(active, "active")? = c.active;
        Ok(())
    })
}

/// Class weight `1 + gamma * f(rank)`; `rank == 0` means unranked.
///
/// # Safety
/// `weight` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vm_rank_weight(rank: u32, gamma: f64, weight: *mut f64) -> VmStatus {
    guard(|| {
        let r = (rank > 0).then_some(rank);
        let w = rank_weight(r, gamma).map_err(|e| Failure::new(VmStatus::InvalidArgument, e))?;
        *out(weight, "weight")? = w;
        Ok(())
    })
}

/// CASTLE score of a findings JSONL document against a benchmark JSONL
/// manifest, with the built-in bonus table and hierarchy.
///
/// # Safety
/// Both strings must be valid C strings; `total` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vm_castle_score(
    benchmark_jsonl: *const c_char,
    findings_jsonl: *const c_char,
    total: *mut f64,
) -> VmStatus {
    guard(|| {
        let bench: Vec<BenchmarkSample> = parse_jsonl(text(benchmark_jsonl, "benchmark")?, "benchmark")
            .map_err(|e| Failure::new(VmStatus::Parse, e))?;
        let findings: Vec<FindingsRecord> = parse_jsonl(text(findings_jsonl, "findings")?, "findings")
            .map_err(|e| Failure::new(VmStatus::Parse, e))?;
        let bonus = BonusTable::from_ranks(&default_rank_table());
        let hierarchy = Hierarchy::parse(DEFAULT_HIERARCHY).map_err(|e| Failure::new(VmStatus::Parse, e))?;
        let r = castle_score(&bench, &tool_result(&findings), &bonus, &hierarchy)
            .map_err(|e| Failure::new(VmStatus::InvalidArgument, e))?;
        *out(total, "total")? = r.total;
        Ok(())
    })
}

/// Binary metrics for `n` labels (non-zero = vulnerable) and probabilities.
///
/// # Safety
/// `labels` and `probs` must point to `n` elements; `metrics` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vm_binary_metrics(
    labels: *const u8,
    probs: *const f64,
    n: usize,
    threshold: f64,
    metrics: *mut VmBinaryMetrics,
) -> VmStatus {
    guard(|| {
        if n > 0 && (labels.is_null() || probs.is_null()) {
            return Err(Failure::new(VmStatus::NullPointer, "labels or probs is null"));
        }
        let (l, p): (Vec<bool>, &[f64]) = if n == 0 {
            (Vec::new(), &[])
        } else {
            (
                std::slice::from_raw_parts(labels, n).iter().map(|&b| b != 0).collect(),
                std::slice::from_raw_parts(probs, n),
            )
        };
        let m = binary_metrics(&l, p, threshold).map_err(|e| Failure::new(VmStatus::InvalidArgument, e))?;
        let c = m.confusion;
        *out(metrics, "metrics")? = VmBinaryMetrics {
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            tp: c.tp as u64,
            fp: c.fp as u64,
            tn: c.tn as u64,
            fn_: c.fn_ as u64,
        };
        Ok(())
    })
}

/// Agreement-protocol decision for one verifier pair.
///
/// # Safety
/// `decision` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vm_agreement_decide(
    formal: VmFormal,
    llm: VmLlm,
    intent: VmIntent,
    decision: *mut VmDecision,
) -> VmStatus {
    guard(|| {
        let f = match formal {
            VmFormal::ViolationDetected => FormalVerdict::ViolationDetected,
            VmFormal::VerificationSuccess => FormalVerdict::VerificationSuccess,
            VmFormal::Timeout => FormalVerdict::Timeout,
            VmFormal::CompileError => FormalVerdict::CompileError,
        };
        let l = match llm {
            VmLlm::VulnerableViolationDetected => Some(LlmVerdict::VulnerableViolationDetected),
            VmLlm::SafeVerificationSuccess => Some(LlmVerdict::SafeVerificationSuccess),
            VmLlm::SafeIssuesFound => Some(LlmVerdict::SafeIssuesFound),
            VmLlm::VulnerableNoViolation => Some(LlmVerdict::VulnerableNoViolation),
            VmLlm::Absent => None,
        };
        let i = match intent {
            VmIntent::Vulnerable => Intent::Vulnerable,
            VmIntent::Safe => Intent::Safe,
        };
        let d = agreement_decide(f, l, i).map_err(|e| Failure::new(VmStatus::InvalidArgument, e))?;
        *out(decision, "decision")? = match d.decision {
            Decision::Accept => VmDecision::Accept,
            Decision::Discard => VmDecision::Discard,
            Decision::Repair => VmDecision::Repair,
        };
        Ok(())
    })
}

/// MinHash estimate and exact Jaccard similarity of two code snippets,
/// using default shingling and 128 hashes.
///
/// # Safety
/// `a` and `b` must be valid C strings; out-pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vm_minhash_similarity(
    a: *const c_char,
    b: *const c_char,
    seed: u64,
    estimate: *mut f64,
    exact: *mut f64,
) -> VmStatus {
    guard(|| {
        let (a, b) = (text(a, "a")?, text(b, "b")?);
        let cfg = MinHashConfig::default();
        let h = MinHasher::new(cfg.clone(), seed).map_err(|e| Failure::new(VmStatus::InvalidArgument, e))?;
        let sig = |s: &str| h.signature(s).map_err(|e| Failure::new(VmStatus::InvalidArgument, e));
        let est = sig(a)?.jaccard(&sig(b)?).map_err(|e| Failure::new(VmStatus::InvalidArgument, e))?;
        let ex = exact_jaccard(
            &shingles(a, cfg.ngram, cfg.normalize_identifiers),
            &shingles(b, cfg.ngram, cfg.normalize_identifiers),
        );
        *out(estimate, "estimate")? = est;
        *out(exact, "exact")? = ex;
        Ok(())
    })
}

/// Loads a checkpoint directory. Free the handle with [`vm_model_free`].
///
/// # Safety
/// `dir` must be a valid C string; `model` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vm_model_load(dir: *const c_char, model: *mut *mut VmModel) -> VmStatus {
    guard(|| {
        let slot = out(model, "model")?;
        *slot = ptr::null_mut();
        let path = text(dir, "dir")?;
        let ck = load_checkpoint(Path::new(path)).map_err(|e| {
            let status = match e {
                vulnmoe::model::ModelError::Io(_) => VmStatus::Io,
                _ => VmStatus::Model,
            };
            Failure::new(status, e)
        })?;
        let (classes, tok_spec) = checkpoint_settings(&ck, None).map_err(|e| Failure::new(VmStatus::Model, e))?;
        let m = ck.model;
        let tokenizer = tok_spec.build().map_err(|e| Failure::new(VmStatus::Model, e))?;
        *slot = Box::into_raw(Box::new(VmModel { model: m, tokenizer, classes }));
        Ok(())
    })
}

/// Vulnerability probability and top CWE id (the number after `CWE-`) for
/// one C snippet, truncated to the model's maximum length.
///
/// # Safety
/// `model` must come from [`vm_model_load`]; `code` must be a valid C
/// string; out-pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vm_model_predict(
    model: *const VmModel,
    code: *const c_char,
    p_vul: *mut f64,
    cwe_id: *mut u32,
) -> VmStatus {
    guard(|| {
        let m = model
            .as_ref()
            .ok_or_else(|| Failure::new(VmStatus::NullPointer, "model is null"))?;
        let code = text(code, "code")?;
        let ids = encode_truncated(m.tokenizer.as_ref(), code, m.model.config.max_seq_len);
        let preds = m
            .model
            .predict(&Batch::from_sequences(&[ids]))
            .map_err(|e| Failure::new(VmStatus::Model, e))?;
        let (p, probs) = &preds[0];
        let best = probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |a, (i, &q)| if q > a.1 { (i, q) } else { a })
            .0;
        *out(p_vul, "p_vul")? = *p;
        *out(cwe_id, "cwe_id")? = m.classes.get(best).map_or(0, |c| c.0);
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`vm_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vm_model_free(model: *mut VmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
