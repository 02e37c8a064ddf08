//! Finite-difference gradient suites: one check per differentiable graph op,
//! plus the full training loss through a small model.

use rand::Rng as _;
use serde::Serialize;

use crate::loss::{self, LabelVector, LossConfig};
use crate::model::{Batch, ForwardMode, Model, ModelConfig, ModelError};
use crate::rng::{substream, Rng};
use crate::tensor::{grad_check, GradReport, Graph, Tensor, TensorError, Var};

pub const OP_EPS: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-5;
pub const MODEL_EPS: f64 = 3e-4;
pub const MODEL_TOL: f64 = 1e-4;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches buffer")
}

/// `sum(out * w)` with a fixed random `w`, so every output coordinate matters.
fn project(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var, TensorError> {
    let wv = g.constant(w.clone());
    let p = g.mul(out, wv)?;
    Ok(g.sum(p))
}

type OpFn = Box<dyn Fn(&mut Graph, Var) -> Result<Var, TensorError>>;

struct OpCase {
    name: &'static str,
    input: Tensor,
    f: OpFn,
}

fn case(
    name: &'static str,
    input: Tensor,
    out_shape: &[usize],
    rng: &mut Rng,
    op: impl Fn(&mut Graph, Var) -> Result<Var, TensorError> + 'static,
) -> OpCase {
    let w = uniform(out_shape, -1.0, 1.0, rng);
    OpCase {
        name,
        input,
        f: Box::new(move |g, v| {
            let out = op(g, v)?;
            project(g, out, &w)
        }),
    }
}

fn op_cases(rng: &mut Rng) -> Vec<OpCase> {
    let r = |s: &[usize], rng: &mut Rng| uniform(s, -1.0, 1.0, rng);
    let mut v = Vec::new();

    let b = r(&[4, 2], rng);
    v.push(case("matmul.lhs", r(&[3, 4], rng), &[3, 2], rng, move |g, x| {
        let bv = g.constant(b.clone());
        g.matmul(x, bv)
    }));
    let a = r(&[3, 4], rng);
    v.push(case("matmul.rhs", r(&[4, 2], rng), &[3, 2], rng, move |g, x| {
        let av = g.constant(a.clone());
        g.matmul(av, x)
    }));
    let c = r(&[3, 5], rng);
    v.push(case("add", r(&[3, 5], rng), &[3, 5], rng, move |g, x| {
        let cv = g.constant(c.clone());
        g.add(x, cv)
    }));
    let c = r(&[3, 5], rng);
    v.push(case("sub", r(&[3, 5], rng), &[3, 5], rng, move |g, x| {
        let cv = g.constant(c.clone());
        g.sub(cv, x)
    }));
    let c = r(&[4, 3], rng);
    v.push(case("add_bias.bias", r(&[3], rng), &[4, 3], rng, move |g, x| {
        let cv = g.constant(c.clone());
        g.add_bias(cv, x)
    }));
    let c = r(&[2, 4], rng);
    v.push(case("mul", r(&[2, 4], rng), &[2, 4], rng, move |g, x| {
        let cv = g.constant(c.clone());
        g.mul(x, cv)
    }));
    v.push(case("mul.square", r(&[5], rng), &[5], rng, |g, x| g.mul(x, x)));
    let c = r(&[4, 1], rng);
    v.push(case("mul_col.matrix", r(&[4, 3], rng), &[4, 3], rng, move |g, x| {
        let cv = g.constant(c.clone());
        g.mul_col(x, cv)
    }));
    let c = r(&[4, 3], rng);
    v.push(case("mul_col.column", r(&[4, 1], rng), &[4, 3], rng, move |g, x| {
        let cv = g.constant(c.clone());
        g.mul_col(cv, x)
    }));
    v.push(case("affine", r(&[3, 3], rng), &[3, 3], rng, |g, x| Ok(g.affine(x, -1.5, 0.25))));
    v.push(case("scale", r(&[2, 5], rng), &[2, 5], rng, |g, x| Ok(g.scale(x, 3.0))));
    v.push(case("silu", uniform(&[3, 4], -3.0, 3.0, rng), &[3, 4], rng, |g, x| Ok(g.silu(x))));
    v.push(case("sigmoid", uniform(&[3, 4], -3.0, 3.0, rng), &[3, 4], rng, |g, x| Ok(g.sigmoid(x))));
    v.push(case("ln", uniform(&[2, 3], 0.2, 3.0, rng), &[2, 3], rng, |g, x| Ok(g.ln(x))));
    let mut cl = uniform(&[2, 5], -0.4, 0.4, rng);
    cl.data_mut()[0] = 0.9;
    cl.data_mut()[1] = -0.9;
    v.push(case("clamp", cl, &[2, 5], rng, |g, x| Ok(g.clamp(x, -0.5, 0.5))));
    v.push(case("softmax.rows", r(&[3, 4], rng), &[3, 4], rng, |g, x| g.softmax(x, 1)));
    v.push(case("softmax.cols", r(&[3, 4], rng), &[3, 4], rng, |g, x| g.softmax(x, 0)));
    let gamma = uniform(&[5], 0.5, 1.5, rng);
    v.push(case("rms_norm.x", r(&[3, 5], rng), &[3, 5], rng, move |g, x| {
        let gv = g.constant(gamma.clone());
        g.rms_norm(x, gv, 1e-6)
    }));
    let xs = r(&[3, 5], rng);
    v.push(case("rms_norm.gamma", uniform(&[5], 0.5, 1.5, rng), &[3, 5], rng, move |g, gm| {
        let xv = g.constant(xs.clone());
        g.rms_norm(xv, gm, 1e-6)
    }));
    v.push(case("rotate_pairs", r(&[3, 4], rng), &[3, 4], rng, |g, x| {
        g.rotate_pairs(x, |row, k| 0.7 * row as f64 + 0.3 * k as f64)
    }));
    v.push(case("embedding", r(&[5, 3], rng), &[4, 3], rng, |g, t| g.embedding(t, &[1, 4, 1, 0])));
    let c = r(&[3, 2], rng);
    v.push(case("concat_cols", r(&[3, 3], rng), &[3, 8], rng, move |g, x| {
        let cv = g.constant(c.clone());
        g.concat_cols(&[x, cv, x])
    }));
    let c = r(&[1, 3], rng);
    v.push(case("concat_rows", r(&[2, 3], rng), &[5, 3], rng, move |g, x| {
        let cv = g.constant(c.clone());
        g.concat_rows(&[x, cv, x])
    }));
    v.push(case("slice_cols", r(&[3, 5], rng), &[3, 2], rng, |g, x| g.slice_cols(x, 2, 2)));
    v.push(case("select_rows", r(&[4, 3], rng), &[5, 3], rng, |g, x| g.select_rows(x, &[3, 0, 3, 1, 3])));
    v.push(case("scatter_rows", r(&[2, 3], rng), &[5, 3], rng, |g, x| g.scatter_rows(x, &[4, 1], 5)));
    v.push(case("pick", r(&[3, 4], rng), &[4, 1], rng, |g, x| g.pick(x, &[0, 5, 11, 5])));
    v.push(case("transpose", r(&[2, 5], rng), &[5, 2], rng, |g, x| g.transpose(x)));
    v.push(case("reshape", r(&[2, 6], rng), &[3, 4], rng, |g, x| g.reshape(x, vec![3, 4])));
    v.push(case("sum", r(&[3, 3], rng), &[], rng, |g, x| Ok(g.sum(x))));
    v.push(case("mean", r(&[4, 2], rng), &[], rng, |g, x| Ok(g.mean(x))));
    v
}

/// Checks every differentiable op on random inputs with extents at most 5.
pub fn op_suite(seed: u64) -> Result<Vec<GradReport>, TensorError> {
    op_suite_with(seed, OP_EPS, OP_TOL)
}

pub fn op_suite_with(seed: u64, eps: f64, tol: f64) -> Result<Vec<GradReport>, TensorError> {
    let mut rng = substream(seed, "gradcheck.ops");
    op_cases(&mut rng)
        .into_iter()
        .map(|c| grad_check(c.name, c.f, &c.input, eps, tol))
        .collect()
}

/// Small-model setting for the end-to-end check: the tiny preset with a wide
/// initializer so gradients are well away from zero.
pub fn end_to_end_config() -> ModelConfig {
    ModelConfig {
        init_std: 0.5,
        ..ModelConfig::tiny()
    }
}

/// Fixed batch and labels for the end-to-end check.
pub struct LossFixture {
    pub batch: Batch,
    pub vul: Vec<bool>,
    pub labels: Vec<LabelVector>,
    pub weights: Vec<f64>,
    pub loss: LossConfig,
}

impl LossFixture {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        let c = cfg.num_cwe_classes;
        let lens = [5usize, 3, 6];
        let seqs: Vec<Vec<u32>> = lens
            .iter()
            .map(|&n| (0..n).map(|_| rng.random_range(1..cfg.vocab_size as u32)).collect())
            .collect();
        let vul = vec![true, false, true];
        let labels = vul
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let mut y = vec![0.0; c];
                if v {
                    y[i % c] = 1.0;
                }
                LabelVector::new(v, y)
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ModelError::Config(e.to_string()))?;
        Ok(Self {
            batch: Batch::from_sequences(&seqs),
            vul,
            labels,
            weights: (0..c).map(|i| 1.0 + 0.5 * i as f64).collect(),
            loss: LossConfig::default(),
        })
    }

    /// Total loss on `g`; the CWE mask comes from the detached `p_vul`.
    /// Also returns the discrete regime: routed experts per token and mask bits.
    pub fn total(&self, model: &Model, g: &mut Graph, trainable: bool) -> Result<(Var, Vec<Var>, Vec<usize>), ModelError> {
        let p = if trainable { model.bind(g)? } else { model.bind_constants(g)? };
        let out = model.forward(g, &p, &self.batch, ForwardMode::Eval)?;
        let err = |e: loss::LossError| ModelError::Config(e.to_string());
        let (l_vul, p_node) = loss::vul_loss(g, out.binary_logits, &self.vul, &self.loss).map_err(err)?;
        let p_vul = g.value(p_node).data().to_vec();
        let l_cwe = loss::cwe_loss(g, out.cwe_logits, &self.labels, &p_vul, &self.weights, &self.loss).map_err(err)?;
        let total = loss::combine(g, l_vul, Some(l_cwe), &self.loss).map_err(err)?;
        let mut regime: Vec<usize> = out
            .routing
            .iter()
            .flatten()
            .flatten()
            .flat_map(|t| t.selected.iter().map(|&(e, _)| e))
            .collect();
        regime.extend(p_vul.iter().map(|&p| usize::from(p >= self.loss.tau)));
        Ok((total, p.vars, regime))
    }

    fn value(&self, model: &Model) -> Result<(f64, Vec<usize>), ModelError> {
        let mut g = Graph::new();
        let (t, _, regime) = self.total(model, &mut g, false)?;
        Ok((g.value(t).item(), regime))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelGradReport {
    #[serde(flatten)]
    pub report: GradReport,
    pub checked: usize,
    /// Coordinates whose stencil crosses a routing or mask switch.
    pub skipped: usize,
}

/// Fourth-order central-difference check of the total loss against every
/// model parameter. Coordinates where a probe changes the routing or the
/// confidence mask sit on a non-differentiable seam and are skipped.
pub fn model_check(model: &Model, fixture: &LossFixture, eps: f64, tol: f64) -> Result<ModelGradReport, ModelError> {
    let mut g = Graph::new();
    let (root, vars, base) = fixture.total(model, &mut g, true)?;
    g.backward(root)?;
    let analytic: Vec<f64> = vars
        .iter()
        .zip(model.params.iter())
        .flat_map(|(&v, (_, t))| {
            g.grad(v)
                .map(Tensor::into_data)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let mut worst_coordinate = 0;
    let mut flat = 0;
    let (mut checked, mut skipped) = (0, 0);
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let n = model.params.get(name).map_or(0, Tensor::numel);
        for i in 0..n {
            let orig = model.params.get(name).expect("present").data()[i];
            let mut seam = false;
            let mut at = |x: f64| -> Result<f64, ModelError> {
                probe.params.get_mut(name).expect("present").data_mut()[i] = x;
                let (v, regime) = fixture.value(&probe)?;
                seam |= regime != base;
                Ok(v)
            };
            let p1 = at(orig + eps)?;
            let m1 = at(orig - eps)?;
            let p2 = at(orig + 2.0 * eps)?;
            let m2 = at(orig - 2.0 * eps)?;
            probe.params.get_mut(name).expect("present").data_mut()[i] = orig;
            if seam {
                skipped += 1;
                flat += 1;
                continue;
            }
            if ![p1, m1, p2, m2].iter().all(|v| v.is_finite()) {
                return Err(TensorError::NonFinite {
                    coord: flat,
                    detail: format!("loss at `{name}`[{i}]"),
                }
                .into());
            }
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            let a = analytic[flat];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            if rel > worst {
                worst = rel;
                worst_coordinate = flat;
            }
            checked += 1;
            flat += 1;
        }
    }
    Ok(ModelGradReport {
        report: GradReport {
            op_name: "total_loss".into(),
            max_relative_error: worst,
            tolerance: tol,
            passed: worst <= tol,
            worst_coordinate,
        },
        checked,
        skipped,
    })
}

/// The end-to-end check on the wide-init tiny model.
pub fn end_to_end(seed: u64, eps: f64, tol: f64) -> Result<ModelGradReport, ModelError> {
    let cfg = end_to_end_config();
    let model = Model::new(cfg.clone(), &mut substream(seed, "gradcheck.init"))?;
    let fixture = LossFixture::new(&cfg, &mut substream(seed, "gradcheck.data"))?;
    model_check(&model, &fixture, eps, tol)
}
