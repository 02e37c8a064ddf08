use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};

use super::config::{default_classes, default_tokenizer, RunConfig};
use super::{gradcheck, HarnessError};
use crate::corpus::{read_corpus, read_jsonl, validate_corpus, write_jsonl, Sample};
use crate::curation::{cwe_distribution, dedup, leakage_check, MinHashConfig, MinHasher};
use crate::cwe::{castle_classes, CweId, DEFAULT_HIERARCHY};
use crate::eval::{
    binary_metrics, castle_score, findings_at, per_cwe_metrics, threshold_grid, threshold_sweep, tool_result,
    BenchmarkSample, BonusTable, CweRecord, FindingsRecord, Hierarchy,
};
use crate::loss::{class_weights, default_rank_table, LossConfig, RankTable};
use crate::model::tokenizer::TokenizerSpec;
use crate::model::{canonical_json, Checkpoint, count_parameters, load_checkpoint, save_checkpoint, Model, ModelConfig};
use crate::rng::substream;
use crate::synth::{self, SyntheticCorpusSpec, TemplateFamily};
use crate::train::{predict_samples, run_stage, AdamWConfig, AugmentationConfig, TrainContext};

pub const TARGET_TOTAL: u64 = 693_000_000;
pub const TARGET_ACTIVE: u64 = 353_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Score,
    Dedup,
    Leak,
    Gradcheck,
    Paramcount,
    GenSynth,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::Train,
        Command::Eval,
        Command::Score,
        Command::Dedup,
        Command::Leak,
        Command::Gradcheck,
        Command::Paramcount,
        Command::GenSynth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Score => "score",
            Command::Dedup => "dedup",
            Command::Leak => "leak",
            Command::Gradcheck => "gradcheck",
            Command::Paramcount => "paramcount",
            Command::GenSynth => "gen-synth",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown command `{s}`")))
    }
}

/// Result of one command. `report` is what lands in `report.json`.
#[derive(Clone, Debug)]
pub struct CommandOutput {
    pub command: Command,
    pub report: Value,
    /// False when a gate failed (gradient tolerance, leakage, count drift).
    pub passed: bool,
    pub summary: Vec<String>,
    /// Files written, relative to the output directory.
    pub files: Vec<PathBuf>,
}

struct Out<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl Out<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn text(&mut self, name: &str, contents: &str) -> Result<(), HarnessError> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|source| HarnessError::Io { path: p, source })?;
        self.files.push(name.into());
        Ok(())
    }

    fn jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), HarnessError> {
        write_jsonl(&self.path(name), rows)?;
        self.files.push(name.into());
        Ok(())
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

fn read_text(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn section<'a, T>(s: &'a Option<T>, cmd: Command, key: &str) -> Result<&'a T, HarnessError> {
    s.as_ref()
        .ok_or_else(|| HarnessError::Config(format!("`{cmd}` needs a `{key}` section in the config")))
}

struct Resources {
    ranks: RankTable,
    hierarchy: Hierarchy,
    bonus: BonusTable,
}

fn resources(cfg: &RunConfig) -> Result<Resources, HarnessError> {
    let r = &cfg.resources;
    let ranks = match &r.rank_table {
        Some(p) => RankTable::parse(&read_text(p)?)?,
        None => default_rank_table(),
    };
    let hierarchy = match &r.hierarchy {
        Some(p) => Hierarchy::parse(&read_text(p)?)?,
        None => Hierarchy::parse(DEFAULT_HIERARCHY)?,
    };
    let bonus = match &r.bonus_table {
        Some(p) => BonusTable::parse(&read_text(p)?)?,
        None => BonusTable::from_ranks(&ranks),
    };
    Ok(Resources { ranks, hierarchy, bonus })
}

fn read_corpora(paths: &[PathBuf]) -> Result<Vec<Sample>, HarnessError> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(read_corpus(p)?);
    }
    validate_corpus(&all)?;
    Ok(all)
}

/// Runs `cmd`, writing `report.json`, `metadata.json` and any artifacts
/// into `out`. Everything except `metadata.json` is a deterministic
/// function of the config.
pub fn run_command(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<CommandOutput, HarnessError> {
    fs::create_dir_all(out).map_err(|source| HarnessError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let started = Instant::now();
    let mut o = Out { dir: out, files: Vec::new() };
    let (report, passed, summary) = match cmd {
        Command::Paramcount => paramcount(&cfg.model.0),
        Command::GenSynth => gen_synth(cfg, &mut o)?,
        Command::Gradcheck => grad(cfg)?,
        Command::Score => score(cfg)?,
        Command::Dedup => dedup_cmd(cfg, &mut o)?,
        Command::Leak => leak(cfg)?,
        Command::Train => train(cfg, &mut o)?,
        Command::Eval => eval(cfg, &mut o)?,
    };
    o.text("report.json", &(canonical_json(&report).expect("report serializes") + "\n"))?;
    let unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = json!({
        "command": cmd.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "passed": passed,
        "finished_unix": unix,
        "elapsed_ms": started.elapsed().as_millis() as u64,
        "config": cfg,
    });
    o.text("metadata.json", &(canonical_json(&meta).expect("metadata serializes") + "\n"))?;
    Ok(CommandOutput {
        command: cmd,
        report,
        passed,
        summary,
        files: o.files,
    })
}

type Step = (Value, bool, Vec<String>);

fn deviation_pct(actual: u64, target: u64) -> f64 {
    100.0 * (actual as f64 - target as f64) / target as f64
}

pub fn paramcount(model: &ModelConfig) -> Step {
    let c = count_parameters(model);
    let mut summary = vec![
        format!("total parameters:  {}", c.total),
        format!("active parameters: {}", c.active),
    ];
    let mut report = json!({
        "total": c.total,
        "active": c.active,
        "active_fraction": c.active as f64 / c.total as f64,
        "model": model,
    });
    let mut passed = true;
    if *model == ModelConfig::paper() {
        let (dt, da) = (deviation_pct(c.total, TARGET_TOTAL), deviation_pct(c.active, TARGET_ACTIVE));
        passed = dt.abs() <= 1.0 && da.abs() <= 1.0;
        summary.push(format!("total vs {TARGET_TOTAL}: {dt:+.3}%"));
        summary.push(format!("active vs {TARGET_ACTIVE}: {da:+.3}%"));
        report["reference"] = json!({
            "target_total": TARGET_TOTAL,
            "target_active": TARGET_ACTIVE,
            "total_deviation_pct": dt,
            "active_deviation_pct": da,
            "within_one_percent": passed,
        });
    }
    (report, passed, summary)
}

pub fn default_synth_spec(seed: u64) -> SyntheticCorpusSpec {
    SyntheticCorpusSpec {
        num_samples: 250,
        cwes: castle_classes(),
        vulnerable_fraction: 0.6,
        family: TemplateFamily::Benchmark,
        seed,
        id_prefix: String::new(),
    }
}

fn gen_synth(cfg: &RunConfig, o: &mut Out<'_>) -> Result<Step, HarnessError> {
    let spec = cfg.synth.clone().unwrap_or_else(|| default_synth_spec(cfg.seed));
    let corpus = synth::generate(&spec).map_err(HarnessError::Config)?;
    o.jsonl("corpus.jsonl", &corpus)?;
    let tok = cfg.tokenizer_spec().build()?;
    let dist = cwe_distribution(&corpus, tok.as_ref());
    let summary = vec![format!(
        "{} samples ({} vulnerable, {}) -> corpus.jsonl",
        dist.total, dist.vulnerable, dist.vulnerable_share
    )];
    Ok((json!({ "spec": spec, "distribution": dist }), true, summary))
}

fn grad(cfg: &RunConfig) -> Result<Step, HarnessError> {
    let s = cfg.gradcheck.clone().unwrap_or_default();
    let ops = gradcheck::op_suite_with(cfg.seed, s.op_eps, s.op_tol)?;
    let mut passed = ops.iter().all(|r| r.passed);
    let mut summary: Vec<String> = ops
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("FAIL {}: rel err {:.3e} > {:.1e}", r.op_name, r.max_relative_error, r.tolerance))
        .collect();
    let worst = ops.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    summary.push(format!("{} ops checked, worst rel err {worst:.3e}", ops.len()));
    let model = if s.end_to_end {
        let m = gradcheck::end_to_end(cfg.seed, s.model_eps, s.model_tol)?;
        passed &= m.report.passed;
        summary.push(format!(
            "total loss through tiny model: rel err {:.3e} over {} coordinates ({} skipped) {}",
            m.report.max_relative_error,
            m.checked,
            m.skipped,
            if m.report.passed { "ok" } else { "FAIL" }
        ));
        Some(m)
    } else {
        None
    };
    Ok((json!({ "ops": ops, "end_to_end": model, "passed": passed }), passed, summary))
}

fn score(cfg: &RunConfig) -> Result<Step, HarnessError> {
    let s = section(&cfg.score, Command::Score, "score")?;
    let res = resources(cfg)?;
    let bench: Vec<BenchmarkSample> = read_jsonl(&s.benchmark)?;
    let findings: Vec<FindingsRecord> = read_jsonl(&s.findings)?;
    let report = castle_score(&bench, &tool_result(&findings), &res.bonus, &res.hierarchy)?;
    let c = &report.counts;
    let summary = vec![format!(
        "CASTLE {:.2} (bonus {:.2}); tp {} fp {} tn {} fn {}",
        report.total, report.total_bonus, c.tp, c.fp, c.tn, c.fn_
    )];
    Ok((to_value(&report), true, summary))
}

fn hasher(cfg: &MinHashConfig, seed: u64) -> Result<MinHasher, HarnessError> {
    Ok(MinHasher::new(cfg.clone(), seed)?)
}

fn dedup_cmd(cfg: &RunConfig, o: &mut Out<'_>) -> Result<Step, HarnessError> {
    let s = section(&cfg.dedup, Command::Dedup, "dedup")?;
    let corpus = read_corpus(&s.corpus)?;
    let (kept, report) = dedup(&corpus, &hasher(&s.minhash, cfg.seed)?, s.threshold);
    o.jsonl("deduped.jsonl", &kept)?;
    let summary = vec![format!(
        "kept {} of {} samples ({} near-duplicates at J >= {})",
        kept.len(),
        report.input,
        report.removals.len(),
        report.threshold
    )];
    Ok((to_value(&report), true, summary))
}

fn leak(cfg: &RunConfig) -> Result<Step, HarnessError> {
    let s = section(&cfg.leak, Command::Leak, "leak")?;
    let train = read_corpora(&s.train)?;
    let eval = read_corpus(&s.eval)?;
    let report = leakage_check(&train, &eval, &hasher(&s.minhash, cfg.seed)?, s.threshold);
    let summary = vec![format!(
        "{} of {} eval samples above J = {} against the training pool",
        report.flagged.len(),
        report.rows.len(),
        report.threshold
    )];
    Ok((to_value(&report), report.passed, summary))
}

fn checkpoint_meta(classes: &[CweId], tok: &TokenizerSpec, extra: &[(&str, Value)]) -> BTreeMap<String, Value> {
    let mut m = BTreeMap::new();
    m.insert("classes".into(), to_value(&classes));
    m.insert("tokenizer".into(), to_value(tok));
    for (k, v) in extra {
        m.insert((*k).into(), v.clone());
    }
    m
}

fn train(cfg: &RunConfig, o: &mut Out<'_>) -> Result<Step, HarnessError> {
    let t = section(&cfg.train, Command::Train, "train")?;
    if t.stages.is_empty() {
        return Err(HarnessError::Config("`train.stages` is empty".into()));
    }
    let res = resources(cfg)?;
    let mut model = match &t.init_checkpoint {
        Some(p) => load_checkpoint(p)?.model,
        None => Model::new(cfg.model.0.clone(), &mut substream(cfg.seed, "init"))?,
    };
    let classes = match &t.classes {
        Some(c) => c.clone(),
        None => default_classes(model.config.num_cwe_classes)?,
    };
    if classes.len() != model.config.num_cwe_classes {
        return Err(HarnessError::Config(format!(
            "{} classes listed but the model has {} CWE outputs",
            classes.len(),
            model.config.num_cwe_classes
        )));
    }
    let tok_spec = cfg.tokenizer_spec();
    let tok = tok_spec.build()?;
    let bench = t.benchmark.as_deref().map(read_corpus).transpose()?;
    let ctx = TrainContext {
        tokenizer: tok.as_ref(),
        loss: t.loss.clone(),
        optimizer: t.optimizer.clone(),
        augmentation: t.augmentation.clone(),
        class_weights: class_weights(&classes, &res.ranks, t.loss.gamma),
        classes: classes.clone(),
        bonus: res.bonus,
        hierarchy: res.hierarchy,
        val_fraction: t.val_fraction,
        seed: cfg.seed,
        eval_batch: t.eval_batch,
    };
    let mut reports = Vec::new();
    let mut summary = Vec::new();
    for (i, spec) in t.stages.iter().enumerate() {
        let stage = &spec.0;
        if stage.datasets.is_empty() {
            return Err(HarnessError::Config(format!("stage `{}` lists no datasets", stage.name)));
        }
        let corpus = read_corpora(&stage.datasets)?;
        log::info!("stage {} ({}): {} samples", i + 1, stage.name, corpus.len());
        let outcome = run_stage(stage, model, &corpus, bench.as_deref(), &ctx)?;
        let dir = format!("stage{}-{}", i + 1, stage.name);
        let meta = checkpoint_meta(&classes, &tok_spec, &[("stage", json!(stage.name))]);
        save_checkpoint(&o.path(&dir), &outcome.best, &meta)?;
        o.files.push(dir.into());
        let r = &outcome.report;
        summary.push(format!(
            "{}: {} steps, best {:?} {:.4} at epoch {}",
            stage.name, r.steps_run, r.checkpoint_metric, r.best_metric, r.best_epoch
        ));
        reports.push(outcome.report);
        model = outcome.best;
    }
    save_checkpoint(&o.path("model"), &model, &checkpoint_meta(&classes, &tok_spec, &[]))?;
    o.files.push("model".into());
    Ok((json!({ "classes": classes, "stages": reports, "final_checkpoint": "model" }), true, summary))
}

/// Head classes and tokenizer recorded in a checkpoint's metadata, with
/// defaults for checkpoints saved without them.
pub fn checkpoint_settings(
    ckpt: &Checkpoint,
    tokenizer: Option<TokenizerSpec>,
) -> Result<(Vec<CweId>, TokenizerSpec), HarnessError> {
    let cfg = &ckpt.model.config;
    let field = |key: &str| ckpt.metadata.get(key).cloned();
    let bad = |key: &str, e: serde_json::Error| HarnessError::Config(format!("checkpoint metadata `{key}`: {e}"));
    let classes = match field("classes") {
        Some(v) => serde_json::from_value(v).map_err(|e| bad("classes", e))?,
        None => default_classes(cfg.num_cwe_classes)?,
    };
    let tok = match field("tokenizer") {
        Some(v) => serde_json::from_value(v).map_err(|e| bad("tokenizer", e))?,
        None => tokenizer.unwrap_or_else(|| default_tokenizer(cfg.vocab_size)),
    };
    Ok((classes, tok))
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    id: &'a str,
    p_vul: f64,
    cwe: Option<CweId>,
}

fn eval(cfg: &RunConfig, o: &mut Out<'_>) -> Result<Step, HarnessError> {
    let e = section(&cfg.eval, Command::Eval, "eval")?;
    let res = resources(cfg)?;
    let ckpt = load_checkpoint(&e.checkpoint)?;
    let (classes, tok_spec) = checkpoint_settings(&ckpt, cfg.tokenizer.clone())?;
    let model = ckpt.model;
    let tok = tok_spec.build()?;
    let bench = read_corpus(&e.benchmark)?;
    let ctx = TrainContext {
        tokenizer: tok.as_ref(),
        loss: LossConfig::default(),
        optimizer: AdamWConfig::default(),
        augmentation: AugmentationConfig::default(),
        class_weights: vec![1.0; classes.len()],
        classes: classes.clone(),
        bonus: res.bonus.clone(),
        hierarchy: res.hierarchy.clone(),
        val_fraction: 0.0,
        seed: cfg.seed,
        eval_batch: e.eval_batch,
    };
    let refs: Vec<&Sample> = bench.iter().collect();
    let max_len = e.max_seq_len.unwrap_or(model.config.max_seq_len);
    let preds = predict_samples(&model, &refs, &ctx, max_len)?;
    let rows: Vec<PredictionRow<'_>> = bench
        .iter()
        .zip(&preds)
        .map(|(s, p)| PredictionRow { id: &s.id, p_vul: p.p_vul, cwe: p.cwe })
        .collect();
    o.jsonl("predictions.jsonl", &rows)?;

    let manifest: Vec<BenchmarkSample> = bench.iter().map(BenchmarkSample::from).collect();
    let tool = findings_at(&manifest, &preds, e.threshold);
    let findings: Vec<FindingsRecord> = tool
        .iter()
        .map(|(id, set)| FindingsRecord { id: id.clone(), findings: set.iter().copied().collect() })
        .collect();
    o.jsonl("findings.jsonl", &findings)?;

    let labels: Vec<bool> = bench.iter().map(|s| s.label.is_vulnerable()).collect();
    let probs: Vec<f64> = preds.iter().map(|p| p.p_vul).collect();
    let binary = binary_metrics(&labels, &probs, e.threshold)?;
    let records: Vec<CweRecord> = bench
        .iter()
        .zip(&probs)
        .filter_map(|(s, &p)| {
            s.cwe.map(|cwe| CweRecord { cwe, truth: s.label.is_vulnerable(), predicted: p >= e.threshold })
        })
        .collect();
    let per_cwe = per_cwe_metrics(&records, &classes);
    o.text("per_cwe.csv", &per_cwe.to_csv())?;
    let castle = castle_score(&manifest, &tool, &res.bonus, &res.hierarchy)?;
    let grid = threshold_grid(e.sweep.lo, e.sweep.hi, e.sweep.step)?;
    let sweep = threshold_sweep(&manifest, &preds, &res.bonus, &res.hierarchy, &grid, e.threshold)?;
    let summary = vec![
        format!(
            "threshold {}: F1 {:.4} acc {:.4} recall {:.4} precision {:.4}",
            e.threshold, binary.f1, binary.accuracy, binary.recall, binary.precision
        ),
        format!("CASTLE {:.2} (max deviation over sweep {:.2})", castle.total, sweep.max_castle_deviation),
    ];
    let report = json!({
        "threshold": e.threshold,
        "binary": binary,
        "per_cwe": per_cwe,
        "castle": { "total": castle.total, "total_bonus": castle.total_bonus, "counts": castle.counts },
        "sweep": sweep,
    });
    Ok((report, true, summary))
}
