//! Staged training: AdamW with warm-up cosine schedule, per-group learning
//! rates, source augmentation, per-epoch evaluation and checkpoint selection.

mod augment;
mod optim;
mod schedule;

pub use augment::{augment_expr_subst, augment_rename, AugmentationConfig};
pub use optim::{global_norm, AdamW, AdamWConfig, StepStats};
pub use schedule::cosine_lr;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Sample;
use crate::cwe::CweId;
use crate::eval::{self, BenchmarkSample, BonusTable, EvalError, Hierarchy, Prediction};
use crate::loss::{self, LabelVector, LossConfig, LossError};
use crate::model::tokenizer::Tokenizer;
use crate::model::{fresh_cwe_head, Batch, ForwardMode, Model, ModelError, ParamStore};
use crate::rng::substream;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient for `{param}` at step {step}")]
    NonFiniteGradient { step: u64, param: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointMetric {
    ValF1,
    CastleScore,
}

fn default_warmup() -> u64 {
    500
}

/// One row of the stage table plus desk-scale knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub batch_size: usize,
    pub grad_accumulation: usize,
    pub epochs: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub checkpoint_metric: CheckpointMetric,
    /// Corpus files for this stage; the harness concatenates them.
    #[serde(default)]
    pub datasets: Vec<std::path::PathBuf>,
    #[serde(default = "default_warmup")]
    pub warmup_steps: u64,
    /// Train the CWE head with the rank-weighted loss.
    #[serde(default)]
    pub cwe_loss: bool,
    /// Replace the CWE head with a freshly initialised one before training.
    #[serde(default)]
    pub fresh_cwe_head: bool,
    /// Stop once training accuracy reaches this value (checked per epoch).
    #[serde(default)]
    pub stop_at_train_accuracy: Option<f64>,
    /// Hard cap on optimizer steps.
    #[serde(default)]
    pub max_steps: Option<u64>,
}

impl StageConfig {
    fn base(name: &str) -> Self {
        Self {
            name: name.to_string(),
            lr_backbone: 5e-4,
            lr_head: 5e-4,
            batch_size: 32,
            grad_accumulation: 1,
            epochs: 5,
            max_seq_len: 1024,
            dropout: 0.1,
            checkpoint_metric: CheckpointMetric::ValF1,
            datasets: Vec::new(),
            warmup_steps: 500,
            cwe_loss: false,
            fresh_cwe_head: false,
            stop_at_train_accuracy: None,
            max_steps: None,
        }
    }

    /// Binary pre-training on the primary corpus.
    pub fn stage1() -> Self {
        Self::base("stage1")
    }

    /// Binary training on the mixed corpora.
    pub fn stage2() -> Self {
        Self {
            lr_backbone: 1e-4,
            lr_head: 1e-4,
            grad_accumulation: 2,
            epochs: 3,
            ..Self::base("stage2")
        }
    }

    /// CWE fine-tuning with a new head and a faster head learning rate.
    pub fn stage3() -> Self {
        Self {
            lr_backbone: 1e-5,
            lr_head: 5e-4,
            batch_size: 16,
            grad_accumulation: 4,
            checkpoint_metric: CheckpointMetric::CastleScore,
            cwe_loss: true,
            fresh_cwe_head: true,
            ..Self::base("stage3")
        }
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accumulation
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(format!("stage `{}`: {m}", self.name)));
        if self.batch_size == 0 || self.grad_accumulation == 0 || self.epochs == 0 || self.max_seq_len == 0 {
            return bad("batch_size, grad_accumulation, epochs and max_seq_len must be positive".into());
        }
        if !(self.lr_backbone >= 0.0 && self.lr_head >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn total_steps(&self, train_len: usize) -> u64 {
        let per_epoch = train_len.div_ceil(self.effective_batch()) as u64;
        let t = self.epochs as u64 * per_epoch;
        self.max_steps.map_or(t, |m| t.min(m))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Head,
}

/// Backbone: embedding, blocks and the final norm. Head: the two classifiers.
pub fn param_group(name: &str) -> Result<ParamGroup, TrainError> {
    if name.starts_with("head.") {
        Ok(ParamGroup::Head)
    } else if name.starts_with("embed.") || name.starts_with("layers.") || name == "final_norm" {
        Ok(ParamGroup::Backbone)
    } else {
        Err(TrainError::Config(format!("parameter `{name}` belongs to no learning-rate group")))
    }
}

/// Group of every parameter, in store order.
pub fn differential_lr_groups(params: &ParamStore) -> Result<Vec<ParamGroup>, TrainError> {
    params.iter().map(|(n, _)| param_group(n)).collect()
}

/// Fixed (non-model) inputs shared by all stages.
pub struct TrainContext<'a> {
    pub tokenizer: &'a dyn Tokenizer,
    pub loss: LossConfig,
    pub optimizer: AdamWConfig,
    pub augmentation: AugmentationConfig,
    pub classes: Vec<CweId>,
    pub class_weights: Vec<f64>,
    pub bonus: BonusTable,
    pub hierarchy: Hierarchy,
    pub val_fraction: f64,
    pub seed: u64,
    pub eval_batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: u64,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub val_f1: f64,
    pub val_accuracy: f64,
    pub castle_score: Option<f64>,
    pub lr_backbone: f64,
    pub lr_head: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: String,
    pub train_samples: usize,
    pub val_samples: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub steps_run: u64,
    pub step_losses: Vec<f64>,
    pub max_clipped_grad_norm: f64,
    pub epochs: Vec<EpochReport>,
    pub checkpoint_metric: CheckpointMetric,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub stopped_early: bool,
}

#[derive(Debug)]
pub struct StageOutcome {
    pub best: Model,
    pub last: Model,
    pub report: StageReport,
}

/// Token ids truncated to `max_len`; empty inputs become one unknown id.
pub fn encode_truncated(tok: &dyn Tokenizer, code: &str, max_len: usize) -> Vec<u32> {
    let mut ids = tok.encode(code);
    ids.truncate(max_len);
    if ids.is_empty() {
        ids.push(1);
    }
    ids
}

/// Stratified `(label, cwe)` hold-out split. Returns `(train, val)` indices.
pub fn stratified_split(samples: &[Sample], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut groups: BTreeMap<(bool, Option<CweId>), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry((s.label.is_vulnerable(), s.cwe)).or_default().push(i);
    }
    let mut rng = substream(seed, "split");
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (_, mut idx) in groups {
        idx.shuffle(&mut rng);
        let k = (idx.len() as f64 * fraction).round() as usize;
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn labels_for(s: &Sample, classes: &[CweId]) -> Result<LabelVector, LossError> {
    let cwes: Vec<CweId> = s.cwe.into_iter().collect();
    LabelVector::from_cwes(s.label.is_vulnerable(), &cwes, classes)
}

/// Eval-mode predictions: vulnerability probability and top CWE class.
pub fn predict_samples(
    model: &Model,
    samples: &[&Sample],
    ctx: &TrainContext<'_>,
    max_len: usize,
) -> Result<Vec<Prediction>, TrainError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(ctx.eval_batch.max(1)) {
        let seqs: Vec<Vec<u32>> = chunk
            .iter()
            .map(|s| encode_truncated(ctx.tokenizer, &s.code, max_len))
            .collect();
        for (p_vul, probs) in model.predict(&Batch::from_sequences(&seqs))? {
            let best = probs
                .iter()
                .enumerate()
                .fold(None::<(usize, f64)>, |a, (i, &p)| match a {
                    Some((_, bp)) if bp >= p => a,
                    _ => Some((i, p)),
                });
            out.push(Prediction {
                p_vul,
                cwe: best.and_then(|(i, _)| ctx.classes.get(i).copied()),
            });
        }
    }
    Ok(out)
}

fn accuracy(samples: &[&Sample], preds: &[Prediction]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hit = samples
        .iter()
        .zip(preds)
        .filter(|(s, p)| s.label.is_vulnerable() == (p.p_vul >= 0.5))
        .count();
    hit as f64 / samples.len() as f64
}

/// Loss on one micro-batch; gradients are scaled by `scale` and left on `g`.
fn micro_batch(
    model: &Model,
    batch: &[&Sample],
    codes: &[String],
    ctx: &TrainContext<'_>,
    stage: &StageConfig,
    max_len: usize,
    rng: &mut crate::rng::Rng,
    scale: f64,
) -> Result<(f64, Vec<Tensor>), TrainError> {
    let mut g = Graph::new();
    let p = model.bind(&mut g)?;
    let seqs: Vec<Vec<u32>> = codes.iter().map(|c| encode_truncated(ctx.tokenizer, c, max_len)).collect();
    let out = model.forward(&mut g, &p, &Batch::from_sequences(&seqs), ForwardMode::Train(rng))?;
    let vul: Vec<bool> = batch.iter().map(|s| s.label.is_vulnerable()).collect();
    let (l_vul, p_node) = loss::vul_loss(&mut g, out.binary_logits, &vul, &ctx.loss)?;
    let l_cwe = if stage.cwe_loss {
        let p_vul: Vec<f64> = g.value(p_node).data().to_vec();
        let labels = batch
            .iter()
            .map(|s| labels_for(s, &ctx.classes))
            .collect::<Result<Vec<_>, _>>()?;
        Some(loss::cwe_loss(&mut g, out.cwe_logits, &labels, &p_vul, &ctx.class_weights, &ctx.loss)?)
    } else {
        None
    };
    let mut total = loss::combine(&mut g, l_vul, l_cwe, &ctx.loss)?;
    if let Some(b) = out.balance_loss {
        total = g.add(total, b).map_err(ModelError::from)?;
    }
    let value = g.value(total).item();
    loss::check_finite("total", value)?;
    let root = g.scale(total, scale);
    g.backward(root).map_err(ModelError::from)?;
    let grads = p
        .vars
        .iter()
        .zip(model.params.iter())
        .map(|(&v, (_, t))| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    Ok((value, grads))
}

/// Applies the stage dropout and, when configured, swaps in a freshly
/// initialised CWE head. The backbone is left untouched.
pub fn prepare_model(stage: &StageConfig, mut model: Model, seed: u64) -> Model {
    model.config.dropout = stage.dropout;
    if stage.fresh_cwe_head {
        let head = fresh_cwe_head(&model.config, &mut substream(seed, &format!("{}.head", stage.name)));
        model.params.insert("head.cwe", head);
    }
    model
}

/// Trains `model` for one stage and returns the selected checkpoint.
pub fn run_stage(
    stage: &StageConfig,
    model: Model,
    corpus: &[Sample],
    benchmark: Option<&[Sample]>,
    ctx: &TrainContext<'_>,
) -> Result<StageOutcome, TrainError> {
    stage.validate()?;
    ctx.augmentation.validate().map_err(TrainError::Config)?;
    ctx.loss.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::Config(format!("stage `{}` has an empty corpus", stage.name)));
    }
    if stage.checkpoint_metric == CheckpointMetric::CastleScore && benchmark.is_none() {
        return Err(TrainError::Config(format!(
            "stage `{}` selects by castle_score but no benchmark corpus is configured",
            stage.name
        )));
    }
    if ctx.tokenizer.vocab_size() > model.config.vocab_size {
        return Err(TrainError::Config(format!(
            "tokenizer vocabulary {} exceeds model vocab_size {}",
            ctx.tokenizer.vocab_size(),
            model.config.vocab_size
        )));
    }
    if ctx.classes.len() != model.config.num_cwe_classes || ctx.class_weights.len() != ctx.classes.len() {
        return Err(TrainError::Config(format!(
            "{} CWE classes configured for a head of {}",
            ctx.classes.len(),
            model.config.num_cwe_classes
        )));
    }
    if stage.cwe_loss && !corpus.iter().any(|s| s.label.is_vulnerable() && s.cwe.is_some()) {
        return Err(TrainError::Config(format!(
            "stage `{}` trains the CWE head but its corpus has no CWE labels",
            stage.name
        )));
    }
    let tag = |what: &str| format!("{}.{}", stage.name, what);
    let mut model = prepare_model(stage, model, ctx.seed);
    let max_len = stage.max_seq_len.min(model.config.max_seq_len);
    let groups = differential_lr_groups(&model.params)?;

    let (train_idx, val_idx) = stratified_split(corpus, ctx.val_fraction, ctx.seed);
    let train: Vec<&Sample> = train_idx.iter().map(|&i| &corpus[i]).collect();
    let val: Vec<&Sample> = if val_idx.is_empty() {
        log::warn!("stage `{}`: validation split is empty; validating on the training split", stage.name);
        train.clone()
    } else {
        val_idx.iter().map(|&i| &corpus[i]).collect()
    };
    if train.is_empty() {
        return Err(TrainError::Config(format!("stage `{}`: no training samples after split", stage.name)));
    }
    let bench: Option<(Vec<&Sample>, Vec<BenchmarkSample>)> =
        benchmark.map(|b| (b.iter().collect(), b.iter().map(BenchmarkSample::from).collect()));

    let total_steps = stage.total_steps(train.len());
    let mut warmup = stage.warmup_steps;
    if total_steps <= warmup {
        warmup = total_steps / 10;
        log::warn!(
            "stage `{}`: {total_steps} total steps do not exceed the {} warm-up steps; using {warmup}",
            stage.name,
            stage.warmup_steps
        );
    }
    let lr_at = |step: u64| -> Result<(f64, f64), TrainError> {
        let f = cosine_lr(step, total_steps, warmup, 1.0, 0.0)?;
        Ok((f * stage.lr_backbone, f * stage.lr_head))
    };

    let mut opt = AdamW::new(ctx.optimizer.clone(), &model.params);
    let mut shuffle_rng = substream(ctx.seed, &tag("shuffle"));
    let mut aug_rng = substream(ctx.seed, &tag("augment"));
    let mut drop_rng = substream(ctx.seed, &tag("dropout"));
    let mut step_losses = Vec::new();
    let mut epochs = Vec::new();
    let mut max_clipped: f64 = 0.0;
    let mut best: Option<(usize, f64, Model)> = None;
    let mut stopped_early = false;
    let mut step: u64 = 0;
    let mut lrs_now = (0.0, 0.0);

    'epochs: for epoch in 1..=stage.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_updates = 0usize;
        for group in order.chunks(stage.effective_batch()) {
            if step >= total_steps {
                break;
            }
            let micro: Vec<&[usize]> = group.chunks(stage.batch_size).collect();
            let mut acc: Option<Vec<Tensor>> = None;
            let mut step_loss = 0.0;
            for mb in &micro {
                let samples: Vec<&Sample> = mb.iter().map(|&i| train[i]).collect();
                let codes: Vec<String> = samples.iter().map(|s| ctx.augmentation.apply(&s.code, &mut aug_rng)).collect();
                let w = mb.len() as f64 / group.len() as f64;
                let (l, grads) = micro_batch(&model, &samples, &codes, ctx, stage, max_len, &mut drop_rng, w)?;
                step_loss += w * l;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(&grads) {
                            x.data_mut().iter_mut().zip(y.data()).for_each(|(p, q)| *p += q);
                        }
                    }
                }
            }
            let mut grads = acc.expect("non-empty group");
            let (lb, lh) = lr_at(step + 1)?;
            lrs_now = (lb, lh);
            let lrs: Vec<f64> = groups
                .iter()
                .map(|g| match g {
                    ParamGroup::Backbone => lb,
                    ParamGroup::Head => lh,
                })
                .collect();
            let stats = opt.step(&mut model.params, &mut grads, &lrs)?;
            max_clipped = max_clipped.max(stats.clipped_norm);
            step += 1;
            step_losses.push(step_loss);
            epoch_loss += step_loss;
            epoch_updates += 1;
        }

        let train_preds = predict_samples(&model, &train, ctx, max_len)?;
        let train_accuracy = accuracy(&train, &train_preds);
        let val_preds = predict_samples(&model, &val, ctx, max_len)?;
        let val_labels: Vec<bool> = val.iter().map(|s| s.label.is_vulnerable()).collect();
        let val_probs: Vec<f64> = val_preds.iter().map(|p| p.p_vul).collect();
        let vm = eval::binary_metrics(&val_labels, &val_probs, 0.5)?;
        let castle_score = match &bench {
            Some((samples, manifest)) => {
                let preds = predict_samples(&model, samples, ctx, max_len)?;
                let found = eval::findings_at(manifest, &preds, 0.5);
                Some(eval::castle_score(manifest, &found, &ctx.bonus, &ctx.hierarchy)?.total)
            }
            None => None,
        };
        let metric = match stage.checkpoint_metric {
            CheckpointMetric::ValF1 => vm.f1,
            CheckpointMetric::CastleScore => castle_score.expect("checked above"),
        };
        log::info!(
            "{} epoch {epoch}: loss {:.4} train acc {:.3} val f1 {:.3}{}",
            stage.name,
            epoch_loss / epoch_updates.max(1) as f64,
            train_accuracy,
            vm.f1,
            castle_score.map(|c| format!(" castle {c:.1}")).unwrap_or_default()
        );
        epochs.push(EpochReport {
            epoch,
            steps: step,
            mean_loss: epoch_loss / epoch_updates.max(1) as f64,
            train_accuracy,
            val_f1: vm.f1,
            val_accuracy: vm.accuracy,
            castle_score,
            lr_backbone: lrs_now.0,
            lr_head: lrs_now.1,
        });
        if best.as_ref().is_none_or(|(_, m, _)| metric > *m) {
            best = Some((epoch, metric, model.clone()));
        }
        if stage.stop_at_train_accuracy.is_some_and(|t| train_accuracy >= t) {
            stopped_early = true;
            break 'epochs;
        }
        if step >= total_steps {
            break;
        }
    }

    let (best_epoch, best_metric, best_model) = best.expect("at least one epoch");
    Ok(StageOutcome {
        best: best_model,
        last: model,
        report: StageReport {
            stage: stage.name.clone(),
            train_samples: train.len(),
            val_samples: val_idx.len(),
            total_steps,
            warmup_steps: warmup,
            steps_run: step,
            step_losses,
            max_clipped_grad_norm: max_clipped,
            epochs,
            checkpoint_metric: stage.checkpoint_metric,
            best_epoch,
            best_metric,
            stopped_early,
        },
    })
}

/// Runs stages in order, each starting from the previous stage's best model.
pub fn run_pipeline(
    stages: &[(StageConfig, Vec<Sample>)],
    model: Model,
    benchmark: Option<&[Sample]>,
    ctx: &TrainContext<'_>,
) -> Result<(Model, Vec<StageReport>), TrainError> {
    let mut model = model;
    let mut reports = Vec::with_capacity(stages.len());
    for (stage, corpus) in stages {
        let out = run_stage(stage, model, corpus, benchmark, ctx)?;
        reports.push(out.report);
        model = out.best;
    }
    Ok((model, reports))
}
