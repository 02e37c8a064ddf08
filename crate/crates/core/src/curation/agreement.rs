use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::CurationError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormalVerdict {
    #[serde(alias = "ViolationDetected")]
    ViolationDetected,
    #[serde(alias = "VerificationSuccess")]
    VerificationSuccess,
    #[serde(alias = "Timeout")]
    Timeout,
    #[serde(alias = "CompileError")]
    CompileError,
}

impl FormalVerdict {
    pub const ALL: [FormalVerdict; 4] = [
        FormalVerdict::ViolationDetected,
        FormalVerdict::VerificationSuccess,
        FormalVerdict::Timeout,
        FormalVerdict::CompileError,
    ];

    /// Verdicts that settle the verification question one way or the other.
    pub fn is_decisive(self) -> bool {
        matches!(self, FormalVerdict::ViolationDetected | FormalVerdict::VerificationSuccess)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LlmVerdict {
    #[serde(rename = "Vulnerable Code: Violation Detected")]
    VulnerableViolationDetected,
    #[serde(rename = "Safe Code: Verification Success")]
    SafeVerificationSuccess,
    #[serde(rename = "Safe Code: Issues Found")]
    SafeIssuesFound,
    #[serde(rename = "Vulnerable Code: No Violation")]
    VulnerableNoViolation,
}

impl LlmVerdict {
    pub const ALL: [LlmVerdict; 4] = [
        LlmVerdict::VulnerableViolationDetected,
        LlmVerdict::SafeVerificationSuccess,
        LlmVerdict::SafeIssuesFound,
        LlmVerdict::VulnerableNoViolation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LlmVerdict::VulnerableViolationDetected => "Vulnerable Code: Violation Detected",
            LlmVerdict::SafeVerificationSuccess => "Safe Code: Verification Success",
            LlmVerdict::SafeIssuesFound => "Safe Code: Issues Found",
            LlmVerdict::VulnerableNoViolation => "Vulnerable Code: No Violation",
        }
    }
}

impl std::str::FromStr for LlmVerdict {
    type Err = CurationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LlmVerdict::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| CurationError::Parse(format!("unrecognised LLM verdict `{s}`")))
    }
}

impl fmt::Display for LlmVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What the generator meant to produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intent {
    Vulnerable,
    Safe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Discard,
    Repair,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CurationDecision {
    pub decision: Decision,
    pub reason: String,
}

impl CurationDecision {
    fn new(decision: Decision, reason: impl Into<String>) -> Self {
        Self {
            decision,
            reason: reason.into(),
        }
    }
}

/// Combines the two verifier verdicts with the generation intent.
///
/// Only matching decisive verdicts that agree with the intent are accepted.
/// A formal timeout or compile error sends the sample back for repair.
pub fn agreement_decide(
    formal: FormalVerdict,
    llm: Option<LlmVerdict>,
    intent: Intent,
) -> Result<CurationDecision, CurationError> {
    use FormalVerdict as F;
    use LlmVerdict as L;
    match formal {
        F::Timeout => return Ok(CurationDecision::new(Decision::Repair, "formal verifier timed out")),
        F::CompileError => return Ok(CurationDecision::new(Decision::Repair, "sample does not compile")),
        _ => {}
    }
    let llm = llm.ok_or(CurationError::Protocol(format!(
        "formal verdict {formal:?} requires an LLM verdict"
    )))?;
    let d = match (formal, llm, intent) {
        (F::ViolationDetected, L::VulnerableViolationDetected, Intent::Vulnerable) => {
            CurationDecision::new(Decision::Accept, "both verifiers confirm the vulnerability")
        }
        (F::VerificationSuccess, L::SafeVerificationSuccess, Intent::Safe) => {
            CurationDecision::new(Decision::Accept, "both verifiers confirm the sample is safe")
        }
        (F::ViolationDetected, L::VulnerableViolationDetected, Intent::Safe)
        | (F::VerificationSuccess, L::SafeVerificationSuccess, Intent::Vulnerable) => {
            CurationDecision::new(Decision::Discard, "verifiers agree but contradict the intended label")
        }
        _ => CurationDecision::new(
            Decision::Discard,
            format!("verification disagreement: formal {formal:?}, LLM \"{llm}\""),
        ),
    };
    Ok(d)
}

/// Internal failure of a verifier or repair step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fault(pub String);

pub trait FormalVerifier {
    fn verify(&mut self, sample_id: &str, code: &str, iteration: usize) -> Result<FormalVerdict, Fault>;
}

pub trait LlmVerifier {
    fn judge(&mut self, sample_id: &str, code: &str, iteration: usize) -> Result<Option<LlmVerdict>, Fault>;
}

pub trait Repairer {
    fn repair(&mut self, sample_id: &str, code: &str, iteration: usize) -> Result<String, Fault>;
}

/// Leaves the code unchanged; useful with scripted verifiers.
pub struct IdentityRepair;

impl Repairer for IdentityRepair {
    fn repair(&mut self, _: &str, code: &str, _: usize) -> Result<String, Fault> {
        Ok(code.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum LoopStatus {
    Decided(CurationDecision),
    Quarantined { diagnostic: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RepairOutcome {
    pub sample_id: String,
    #[serde(flatten)]
    pub status: LoopStatus,
    /// Verification attempts made.
    pub iterations: usize,
    #[serde(skip)]
    pub final_code: String,
}

impl RepairOutcome {
    pub fn decision(&self) -> Option<Decision> {
        match &self.status {
            LoopStatus::Decided(d) => Some(d.decision),
            LoopStatus::Quarantined { .. } => None,
        }
    }
}

pub const DEFAULT_MAX_ITERS: usize = 5;

/// Verify, decide, and repair until the decision is final or `max_iters`
/// verification attempts have been spent (then discard).
pub fn repair_loop(
    sample_id: &str,
    code: &str,
    intent: Intent,
    formal: &mut dyn FormalVerifier,
    llm: &mut dyn LlmVerifier,
    repairer: &mut dyn Repairer,
    max_iters: usize,
) -> RepairOutcome {
    let mut code = code.to_string();
    let quarantine = |it: usize, code: String, what: &str, f: Fault| RepairOutcome {
        sample_id: sample_id.to_string(),
        status: LoopStatus::Quarantined {
            diagnostic: format!("{what} fault at iteration {it}: {}", f.0),
        },
        iterations: it,
        final_code: code,
    };
    for it in 1..=max_iters {
        let fv = match formal.verify(sample_id, &code, it) {
            Ok(v) => v,
            Err(f) => return quarantine(it, code, "formal verifier", f),
        };
        let lv = match llm.judge(sample_id, &code, it) {
            Ok(v) => v,
            Err(f) => return quarantine(it, code, "LLM verifier", f),
        };
        let d = match agreement_decide(fv, lv, intent) {
            Ok(d) => d,
            Err(e) => return quarantine(it, code, "protocol", Fault(e.to_string())),
        };
        if d.decision != Decision::Repair {
            return RepairOutcome {
                sample_id: sample_id.to_string(),
                status: LoopStatus::Decided(d),
                iterations: it,
                final_code: code,
            };
        }
        if it == max_iters {
            break;
        }
        code = match repairer.repair(sample_id, &code, it) {
            Ok(c) => c,
            Err(f) => return quarantine(it, code, "repair", f),
        };
    }
    RepairOutcome {
        sample_id: sample_id.to_string(),
        status: LoopStatus::Decided(CurationDecision::new(
            Decision::Discard,
            format!("still unverifiable after {max_iters} attempts"),
        )),
        iterations: max_iters,
        final_code: code,
    }
}

/// One line of a mock verifier script.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptLine {
    pub sample_id: String,
    pub iteration: usize,
    pub formal: FormalVerdict,
    #[serde(default)]
    pub llm: Option<LlmVerdict>,
}

/// Declarative mock: verdicts per `(sample, iteration)`. The last scripted
/// iteration repeats for later attempts.
#[derive(Clone, Debug, Default)]
pub struct ScriptedVerifier {
    script: BTreeMap<String, BTreeMap<usize, (FormalVerdict, Option<LlmVerdict>)>>,
}

impl ScriptedVerifier {
    pub fn new(lines: impl IntoIterator<Item = ScriptLine>) -> Self {
        let mut script: BTreeMap<String, BTreeMap<usize, _>> = BTreeMap::new();
        for l in lines {
            script.entry(l.sample_id).or_default().insert(l.iteration, (l.formal, l.llm));
        }
        Self { script }
    }

    fn lookup(&self, id: &str, it: usize) -> Result<(FormalVerdict, Option<LlmVerdict>), Fault> {
        self.script
            .get(id)
            .and_then(|m| m.range(..=it).next_back())
            .map(|(_, v)| *v)
            .ok_or_else(|| Fault(format!("no scripted verdict for `{id}` at iteration {it}")))
    }

    pub fn sample_ids(&self) -> impl Iterator<Item = &str> {
        self.script.keys().map(String::as_str)
    }
}

impl FormalVerifier for ScriptedVerifier {
    fn verify(&mut self, id: &str, _: &str, it: usize) -> Result<FormalVerdict, Fault> {
        self.lookup(id, it).map(|v| v.0)
    }
}

impl LlmVerifier for ScriptedVerifier {
    fn judge(&mut self, id: &str, _: &str, it: usize) -> Result<Option<LlmVerdict>, Fault> {
        self.lookup(id, it).map(|v| v.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(script: Vec<ScriptLine>) -> RepairOutcome {
        let mut f = ScriptedVerifier::new(script.clone());
        let mut l = ScriptedVerifier::new(script);
        repair_loop("s", "int x;", Intent::Vulnerable, &mut f, &mut l, &mut IdentityRepair, DEFAULT_MAX_ITERS)
    }

    fn line(it: usize, formal: FormalVerdict, llm: Option<LlmVerdict>) -> ScriptLine {
        ScriptLine { sample_id: "s".into(), iteration: it, formal, llm }
    }

    #[test]
    fn documented_decisions() {
        use FormalVerdict as F;
        use LlmVerdict as L;
        let d = |f, l, i| agreement_decide(f, l, i).unwrap().decision;
        assert_eq!(d(F::ViolationDetected, Some(L::VulnerableViolationDetected), Intent::Vulnerable), Decision::Accept);
        assert_eq!(d(F::VerificationSuccess, Some(L::SafeIssuesFound), Intent::Safe), Decision::Discard);
        assert_eq!(d(F::Timeout, None, Intent::Vulnerable), Decision::Repair);
        assert_eq!(d(F::ViolationDetected, Some(L::VulnerableViolationDetected), Intent::Safe), Decision::Discard);
        assert!(agreement_decide(F::ViolationDetected, None, Intent::Vulnerable).is_err());
    }

    #[test]
    fn verdict_strings_are_exact() {
        for v in LlmVerdict::ALL {
            let j = serde_json::to_string(&v).unwrap();
            assert_eq!(j, format!("\"{}\"", v.as_str()));
            assert_eq!(v.as_str().parse::<LlmVerdict>().unwrap(), v);
        }
        assert!("safe code: verification success".parse::<LlmVerdict>().is_err());
    }

    #[test]
    fn success_on_second_attempt() {
        let o = run(vec![
            line(1, FormalVerdict::Timeout, None),
            line(2, FormalVerdict::ViolationDetected, Some(LlmVerdict::VulnerableViolationDetected)),
        ]);
        assert_eq!(o.decision(), Some(Decision::Accept));
        assert_eq!(o.iterations, 2);
    }

    #[test]
    fn perpetual_timeout_discards_at_limit() {
        let o = run(vec![line(1, FormalVerdict::Timeout, None)]);
        assert_eq!(o.decision(), Some(Decision::Discard));
        assert_eq!(o.iterations, 5);
    }

    #[test]
    fn disagreement_discards_immediately() {
        let o = run(vec![line(1, FormalVerdict::ViolationDetected, Some(LlmVerdict::SafeIssuesFound))]);
        assert_eq!(o.decision(), Some(Decision::Discard));
        assert_eq!(o.iterations, 1);
    }

    #[test]
    fn missing_script_quarantines() {
        let mut f = ScriptedVerifier::default();
        let mut l = ScriptedVerifier::default();
        let o = repair_loop("x", "", Intent::Safe, &mut f, &mut l, &mut IdentityRepair, 5);
        assert!(matches!(o.status, LoopStatus::Quarantined { .. }));
    }

    #[test]
    fn script_lines_parse() {
        let l: ScriptLine = serde_json::from_str(
            r#"{"sample_id":"a","iteration":1,"formal":"ViolationDetected","llm":"Vulnerable Code: No Violation"}"#,
        )
        .unwrap();
        assert_eq!(l.llm, Some(LlmVerdict::VulnerableNoViolation));
        let l: ScriptLine = serde_json::from_str(r#"{"sample_id":"a","iteration":2,"formal":"timeout"}"#).unwrap();
        assert_eq!(l.formal, FormalVerdict::Timeout);
    }
}
