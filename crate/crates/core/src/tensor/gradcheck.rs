use serde::Serialize;

use super::{Graph, Tensor, TensorError, Var};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub op_name: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Coordinate that produced the largest relative error.
    pub worst_coordinate: usize,
}

fn eval_scalar<E, F>(f: &F, x: &Tensor, coord: usize) -> Result<f64, E>
where
    E: From<TensorError>,
    F: Fn(&mut Graph, Var) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let out = f(&mut g, v)?;
    let value = g.value(out);
    if value.numel() != 1 {
        return Err(TensorError::NonScalarRoot {
            shape: value.shape().to_vec(),
        }
        .into());
    }
    let y = value.item();
    if !y.is_finite() {
        return Err(TensorError::NonFinite {
            coord,
            detail: format!("function value {y}"),
        }
        .into());
    }
    Ok(y)
}

/// Checks the gradient of the scalar function `f` at `x`.
///
/// The relative error per coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn grad_check<E, F>(
    op_name: &str,
    f: F,
    x: &Tensor,
    eps: f64,
    tol: f64,
) -> Result<GradReport, E>
where
    E: From<TensorError>,
    F: Fn(&mut Graph, Var) -> Result<Var, E>,
{
    if let Some(coord) = x.data().iter().position(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite {
            coord,
            detail: "input".into(),
        }
        .into());
    }
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let out = f(&mut g, v)?;
    g.backward(out)?;
    let analytic = g
        .grad(v)
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst = 0.0f64;
    let mut worst_coordinate = 0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval_scalar(&f, &probe, i)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval_scalar(&f, &probe, i)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        if !a.is_finite() {
            return Err(TensorError::NonFinite {
                coord: i,
                detail: format!("analytic gradient {a}"),
            }
            .into());
        }
        let denom = a.abs().max(numeric.abs()).max(1e-12);
        let rel = (a - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
            worst_coordinate = i;
        }
    }
    Ok(GradReport {
        op_name: op_name.to_string(),
        max_relative_error: worst,
        tolerance: tol,
        passed: worst <= tol,
        worst_coordinate,
    })
}
