use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use super::HarnessError;
use crate::cwe::{castle_classes, CweId};
use crate::curation::MinHashConfig;
use crate::loss::LossConfig;
use crate::model::tokenizer::{LexerTokenizer, TokenizerSpec};
use crate::model::ModelConfig;
use crate::synth::SyntheticCorpusSpec;
use crate::train::{AdamWConfig, AugmentationConfig, StageConfig};

/// Accepts a preset name, an object with `"preset"` plus field overrides,
/// or a complete object. Overrides are checked against the full schema.
fn preset_or_object<'de, D, T, F>(de: D, lookup: F) -> Result<T, D::Error>
where
    D: Deserializer<'de>,
    T: DeserializeOwned + Serialize,
    F: Fn(&str) -> Result<T, String>,
{
    use serde::de::Error;
    let v = Value::deserialize(de)?;
    let merged = match v {
        Value::String(name) => return lookup(&name).map_err(D::Error::custom),
        Value::Object(mut fields) => match fields.remove("preset") {
            Some(Value::String(name)) => {
                let base = lookup(&name).map_err(D::Error::custom)?;
                let mut base = serde_json::to_value(base).map_err(D::Error::custom)?;
                let obj = base.as_object_mut().expect("config serializes to an object");
                obj.extend(fields);
                base
            }
            Some(other) => return Err(D::Error::custom(format!("`preset` must be a string, got {other}"))),
            None => Value::Object(fields),
        },
        other => return Err(D::Error::custom(format!("expected a preset name or an object, got {other}"))),
    };
    serde_json::from_value(merged).map_err(D::Error::custom)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ModelSpec(pub ModelConfig);

impl<'de> Deserialize<'de> for ModelSpec {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        preset_or_object(de, |n| ModelConfig::preset(n).map_err(|e| e.to_string())).map(ModelSpec)
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec(ModelConfig::tiny())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct StageSpec(pub StageConfig);

pub fn stage_preset(name: &str) -> Result<StageConfig, String> {
    match name {
        "stage1" => Ok(StageConfig::stage1()),
        "stage2" => Ok(StageConfig::stage2()),
        "stage3" => Ok(StageConfig::stage3()),
        other => Err(format!("unknown stage preset `{other}` (available: stage1, stage2, stage3)")),
    }
}

impl<'de> Deserialize<'de> for StageSpec {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        preset_or_object(de, stage_preset).map(StageSpec)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resources {
    /// `cwe,rank` CSV; the built-in table when absent.
    #[serde(default)]
    pub rank_table: Option<PathBuf>,
    /// `parent,child` lines; the built-in hierarchy when absent.
    #[serde(default)]
    pub hierarchy: Option<PathBuf>,
    /// `cwe,bonus` CSV; derived from the rank table when absent.
    #[serde(default)]
    pub bonus_table: Option<PathBuf>,
}

fn default_val_fraction() -> f64 {
    0.1
}

fn default_eval_batch() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub stages: Vec<StageSpec>,
    /// Benchmark corpus for stages that select checkpoints by CASTLE score.
    #[serde(default)]
    pub benchmark: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh initialisation.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    /// CWE head classes in order; the first `num_cwe_classes` benchmark
    /// CWEs when absent.
    #[serde(default)]
    pub classes: Option<Vec<CweId>>,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub augmentation: AugmentationConfig,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
}

fn default_threshold() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRange {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for SweepRange {
    fn default() -> Self {
        Self { lo: 0.3, hi: 0.7, step: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: PathBuf,
    pub benchmark: PathBuf,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub sweep: SweepRange,
    /// Truncation length; the model's `max_seq_len` when absent.
    #[serde(default)]
    pub max_seq_len: Option<usize>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSection {
    pub benchmark: PathBuf,
    pub findings: PathBuf,
}

fn default_dedup_threshold() -> f64 {
    0.85
}

fn default_leak_threshold() -> f64 {
    0.35
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DedupSection {
    pub corpus: PathBuf,
    #[serde(default = "default_dedup_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub minhash: MinHashConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeakSection {
    pub train: Vec<PathBuf>,
    pub eval: PathBuf,
    #[serde(default = "default_leak_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub minhash: MinHashConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    #[serde(default = "op_eps")]
    pub op_eps: f64,
    #[serde(default = "op_tol")]
    pub op_tol: f64,
    #[serde(default = "model_eps")]
    pub model_eps: f64,
    #[serde(default = "model_tol")]
    pub model_tol: f64,
    /// Include the end-to-end loss check through the tiny model.
    #[serde(default = "yes")]
    pub end_to_end: bool,
}

fn op_eps() -> f64 {
    super::gradcheck::OP_EPS
}
fn op_tol() -> f64 {
    super::gradcheck::OP_TOL
}
fn model_eps() -> f64 {
    super::gradcheck::MODEL_EPS
}
fn model_tol() -> f64 {
    super::gradcheck::MODEL_TOL
}
fn yes() -> bool {
    true
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            op_eps: op_eps(),
            op_tol: op_tol(),
            model_eps: model_eps(),
            model_tol: model_tol(),
            end_to_end: true,
        }
    }
}

fn default_seed() -> u64 {
    42
}

/// Top-level run configuration. Every command reads the shared fields and
/// its own section; sections for other commands are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSpec,
    /// Tokenizer; chosen from the model vocabulary size when absent.
    #[serde(default)]
    pub tokenizer: Option<TokenizerSpec>,
    #[serde(default)]
    pub resources: Resources,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub eval: Option<EvalSection>,
    #[serde(default)]
    pub score: Option<ScoreSection>,
    #[serde(default)]
    pub dedup: Option<DedupSection>,
    #[serde(default)]
    pub leak: Option<LeakSection>,
    #[serde(default)]
    pub gradcheck: Option<GradcheckSection>,
    #[serde(default)]
    pub synth: Option<SyntheticCorpusSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Loads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let Some(dir) = path.parent() {
            cfg.rebase(dir);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        let fix_opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                fix(p);
            }
        };
        fix_opt(&mut self.out);
        fix_opt(&mut self.resources.rank_table);
        fix_opt(&mut self.resources.hierarchy);
        fix_opt(&mut self.resources.bonus_table);
        if let Some(t) = &mut self.train {
            fix_opt(&mut t.benchmark);
            fix_opt(&mut t.init_checkpoint);
            for s in &mut t.stages {
                s.0.datasets.iter_mut().for_each(fix);
            }
        }
        if let Some(e) = &mut self.eval {
            fix(&mut e.checkpoint);
            fix(&mut e.benchmark);
        }
        if let Some(s) = &mut self.score {
            fix(&mut s.benchmark);
            fix(&mut s.findings);
        }
        if let Some(d) = &mut self.dedup {
            fix(&mut d.corpus);
        }
        if let Some(l) = &mut self.leak {
            l.train.iter_mut().for_each(fix);
            fix(&mut l.eval);
        }
    }

    /// Command-line seed: replaces the run seed and the synthetic corpus seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        if let Some(s) = &mut self.synth {
            s.seed = seed;
        }
    }

    pub fn tokenizer_spec(&self) -> TokenizerSpec {
        self.tokenizer.clone().unwrap_or_else(|| default_tokenizer(self.model.0.vocab_size))
    }
}

/// The first `n` benchmark CWEs.
pub fn default_classes(n: usize) -> Result<Vec<CweId>, HarnessError> {
    let all = castle_classes();
    if n > all.len() {
        return Err(HarnessError::Config(format!(
            "model has {n} CWE classes but only {} defaults exist; list `train.classes` explicitly",
            all.len()
        )));
    }
    Ok(all[..n].to_vec())
}

/// Lexer tokenizer when the vocabulary can hold its fixed entries, hashed otherwise.
pub fn default_tokenizer(vocab_size: usize) -> TokenizerSpec {
    if LexerTokenizer::new(vocab_size).is_ok() {
        TokenizerSpec::Lexer { vocab_size }
    } else {
        TokenizerSpec::Hashed { vocab_size }
    }
}
