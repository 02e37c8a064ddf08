//! Building blocks of the encoder stack, expressed as graph operations.

use rand::Rng as _;
use serde::Serialize;

use super::{AttentionMode, ModelError};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Inverse rotary frequency `base^(-2k/d)` without range checks.
pub fn inverse_frequency(k: usize, head_dim: usize, base: f64) -> f64 {
    base.powf(-2.0 * k as f64 / head_dim as f64)
}

/// Rotary angle step for pair `k` of a `head_dim`-wide head.
pub fn rope_angle(k: usize, head_dim: usize, base: f64) -> Result<f64, ModelError> {
    if k >= head_dim / 2 {
        return Err(ModelError::Range(format!(
            "rotary pair index {k} out of range for head_dim {head_dim}"
        )));
    }
    Ok(inverse_frequency(k, head_dim, base))
}

/// Rotates each pair `(x[2k], x[2k+1])` of row `r` by `positions[r] * theta_k`.
pub fn apply_rope(g: &mut Graph, x: Var, positions: &[usize], base: f64) -> Result<Var, ModelError> {
    let shape = g.value(x).shape().to_vec();
    let [seq, d] = shape[..] else {
        return Err(TensorError::Rank {
            op: "rope",
            expected: 2,
            shape,
        }
        .into());
    };
    if d % 2 != 0 {
        return Err(ModelError::Config(format!("rotary embedding needs an even head dim, got {d}")));
    }
    if positions.len() != seq {
        return Err(ModelError::Config(format!(
            "{} positions for a sequence of {seq}",
            positions.len()
        )));
    }
    let freqs: Vec<f64> = (0..d / 2).map(|k| inverse_frequency(k, d, base)).collect();
    Ok(g.rotate_pairs(x, |r, k| positions[r] as f64 * freqs[k])?)
}

/// Pure-tensor convenience wrapper around [`apply_rope`].
pub fn apply_rope_tensor(x: &Tensor, positions: &[usize], base: f64) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = apply_rope(&mut g, v, positions, base)?;
    Ok(g.value(out).clone())
}

pub fn rms_norm_tensor(x: &Tensor, gamma: &Tensor, eps: f64) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gv = g.constant(gamma.clone());
    let out = g.rms_norm(xv, gv, eps)?;
    Ok(g.value(out).clone())
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionShape {
    pub query_heads: usize,
    pub kv_groups: usize,
    pub head_dim: usize,
    pub rope_base: f64,
    pub mode: AttentionMode,
}

/// Additive score mask: `-inf` where key `j` is padding, or lies after query
/// `i` in causal mode.
pub fn attention_bias(mask: &[u8], mode: AttentionMode) -> Tensor {
    let n = mask.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if mask[j] == 0 || (mode == AttentionMode::Causal && j > i) {
                data[i * n + j] = f64::NEG_INFINITY;
            }
        }
    }
    Tensor::new(vec![n, n], data).expect("square")
}

/// Grouped-query attention over `h` (`[seq, d_model]`).
///
/// Query head `i` reads key/value head `i / (H / G)`. Rotary embedding is
/// applied to queries and keys; scores are scaled by `1 / sqrt(head_dim)`.
pub fn gqa_attention(
    g: &mut Graph,
    h: Var,
    w: &AttentionVars,
    shape: &AttentionShape,
    mask: &[u8],
    positions: &[usize],
) -> Result<Var, ModelError> {
    let AttentionShape {
        query_heads,
        kv_groups,
        head_dim,
        rope_base,
        mode,
    } = *shape;
    if kv_groups == 0 || query_heads % kv_groups != 0 {
        return Err(ModelError::Config(format!(
            "query_heads ({query_heads}) must be a multiple of kv_groups ({kv_groups})"
        )));
    }
    let seq = g.value(h).rows();
    if mask.len() != seq {
        return Err(ModelError::InvalidMask(format!(
            "mask length {} does not match sequence length {seq}",
            mask.len()
        )));
    }
    let per_group = query_heads / kv_groups;
    let q = g.matmul(h, w.wq)?;
    let k = g.matmul(h, w.wk)?;
    let v = g.matmul(h, w.wv)?;
    let bias = g.constant(attention_bias(mask, mode));
    let scale = 1.0 / (head_dim as f64).sqrt();

    let mut group_kv = Vec::with_capacity(kv_groups);
    for grp in 0..kv_groups {
        let kh = g.slice_cols(k, grp * head_dim, head_dim)?;
        let kh = apply_rope(g, kh, positions, rope_base)?;
        let kt = g.transpose(kh)?;
        let vh = g.slice_cols(v, grp * head_dim, head_dim)?;
        group_kv.push((kt, vh));
    }

    let mut heads = Vec::with_capacity(query_heads);
    for head in 0..query_heads {
        let (kt, vh) = group_kv[head / per_group];
        let qh = g.slice_cols(q, head * head_dim, head_dim)?;
        let qh = apply_rope(g, qh, positions, rope_base)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let scores = g.add(scores, bias)?;
        let probs = g.softmax(scores, 1)?;
        heads.push(g.matmul(probs, vh)?);
    }
    let concat = g.concat_cols(&heads)?;
    Ok(g.matmul(concat, w.wo)?)
}

#[derive(Clone, Copy, Debug)]
pub struct ExpertVars {
    pub w1: Var,
    pub w2: Var,
    pub w3: Var,
}

/// SwiGLU feed-forward: `(SiLU(x W1) ⊙ (x W3)) W2`.
pub fn expert_forward(g: &mut Graph, x: Var, e: &ExpertVars) -> Result<Var, ModelError> {
    let a = g.matmul(x, e.w1)?;
    let a = g.silu(a);
    let b = g.matmul(x, e.w3)?;
    let h = g.mul(a, b)?;
    Ok(g.matmul(h, e.w2)?)
}

#[derive(Clone, Debug)]
pub struct MoeVars {
    pub gate: Var,
    pub experts: Vec<ExpertVars>,
    pub shared: Vec<ExpertVars>,
}

/// Routing decision for one token.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenRouting {
    /// Selected `(expert, gate weight)` pairs, best first.
    pub selected: Vec<(usize, f64)>,
    /// Full gate distribution over routed experts.
    pub gates: Vec<f64>,
}

/// Indices of the `k` largest entries, descending; ties go to the lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub struct MoeOutput {
    pub output: Var,
    pub routing: Vec<TokenRouting>,
    /// Gate probabilities as a graph node, for the optional balancing loss.
    pub gates: Var,
}

/// Sparse MoE feed-forward over the rows of `x` (`[tokens, d_model]`).
///
/// Each token is routed to its top-`k` experts by softmax gate; selected
/// expert outputs are weighted by their raw gate value (no renormalization
/// over the selected subset). Shared experts process every token ungated.
pub fn moe_forward(g: &mut Graph, x: Var, moe: &MoeVars, k: usize) -> Result<MoeOutput, ModelError> {
    let num_experts = moe.experts.len();
    if k == 0 || k > num_experts {
        return Err(ModelError::Config(format!(
            "top-k ({k}) must lie in 1..={num_experts}"
        )));
    }
    let tokens = g.value(x).rows();
    let logits = g.matmul(x, moe.gate)?;
    let gates = g.softmax(logits, 1)?;

    let gate_vals = g.value(gates).clone();
    let mut routing = Vec::with_capacity(tokens);
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); num_experts];
    for t in 0..tokens {
        let row = gate_vals.row(t);
        let chosen = top_k(row, k);
        for &e in &chosen {
            assigned[e].push(t);
        }
        routing.push(TokenRouting {
            selected: chosen.iter().map(|&e| (e, row[e])).collect(),
            gates: row.to_vec(),
        });
    }

    let mut terms = Vec::new();
    for (e, rows) in assigned.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let sub = g.select_rows(x, rows)?;
        let y = expert_forward(g, sub, &moe.experts[e])?;
        let flat: Vec<usize> = rows.iter().map(|&t| t * num_experts + e).collect();
        let weight = g.pick(gates, &flat)?;
        let y = g.mul_col(y, weight)?;
        terms.push(g.scatter_rows(y, rows, tokens)?);
    }
    for shared in &moe.shared {
        terms.push(expert_forward(g, x, shared)?);
    }
    let mut output = terms[0];
    for &t in &terms[1..] {
        output = g.add(output, t)?;
    }
    Ok(MoeOutput {
        output,
        routing,
        gates,
    })
}

/// Zero-based index of the last unmasked position.
pub fn last_token_index(mask: &[u8]) -> Result<usize, ModelError> {
    let ones = mask.iter().filter(|&&m| m != 0).count();
    if ones == 0 {
        return Err(ModelError::EmptySequence);
    }
    if mask[..ones].iter().any(|&m| m == 0) {
        return Err(ModelError::InvalidMask(
            "padding must be a contiguous suffix".into(),
        ));
    }
    Ok(ones - 1)
}

/// Selects the representation of the last non-padded token as a `[1, d]` row.
pub fn pool_last_token(g: &mut Graph, h: Var, mask: &[u8]) -> Result<Var, ModelError> {
    let idx = last_token_index(mask)?;
    Ok(g.select_rows(h, &[idx])?)
}

/// Inverted dropout with a freshly drawn keep mask.
pub fn dropout(g: &mut Graph, x: Var, p: f64, rng: &mut Rng) -> Result<Var, ModelError> {
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = g.value(x).shape().to_vec();
    let n = g.value(x).numel();
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let m = g.constant(Tensor::new(shape, data)?);
    Ok(g.mul(x, m)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rope_angle_examples() {
        assert_eq!(rope_angle(0, 64, 1e6).unwrap(), 1.0);
        assert!((rope_angle(16, 64, 1e6).unwrap() - 1e-3).abs() < 1e-15);
        // the k = d/2 boundary is only reachable through the unchecked form
        assert!((inverse_frequency(32, 64, 1e6) - 1e-6).abs() < 1e-18);
        assert!(matches!(rope_angle(32, 64, 1e6), Err(ModelError::Range(_))));
    }

    #[test]
    fn rope_at_position_zero_is_identity() {
        let x = Tensor::from_rows(&[vec![0.3, -1.2, 2.0, 0.7]]).unwrap();
        let y = apply_rope_tensor(&x, &[0], 1e6).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rope_rejects_odd_dim() {
        let x = Tensor::zeros(vec![1, 3]);
        assert!(matches!(apply_rope_tensor(&x, &[0], 1e6), Err(ModelError::Config(_))));
    }

    #[test]
    fn rms_norm_examples() {
        let x = Tensor::vector(vec![5.0; 6]);
        let y = rms_norm_tensor(&x, &Tensor::full(vec![6], 1.0), 0.0).unwrap();
        assert!(y.data().iter().all(|v| (v - 1.0).abs() < 1e-6));
        let z = rms_norm_tensor(&Tensor::zeros(vec![4]), &Tensor::full(vec![4], 1.0), 1e-6).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let x = Tensor::vector(vec![0.5, -1.5, 2.25, 3.0]);
        let x7 = Tensor::vector(x.data().iter().map(|v| 7.0 * v).collect());
        let gamma = Tensor::full(vec![4], 1.0);
        let a = rms_norm_tensor(&x, &gamma, 1e-6).unwrap();
        let b = rms_norm_tensor(&x7, &gamma, 1e-6).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn top_k_ties_go_low() {
        assert_eq!(top_k(&[0.2, 0.2, 0.2], 1), vec![0]);
        assert_eq!(top_k(&[0.1, 0.5, 0.4], 2), vec![1, 2]);
        assert_eq!(top_k(&[0.3, 0.3, 0.4], 2), vec![2, 0]);
    }

    #[test]
    fn pooling_examples() {
        assert_eq!(last_token_index(&[1, 1, 1, 0, 0]).unwrap(), 2);
        assert_eq!(last_token_index(&[1; 7]).unwrap(), 6);
        assert!(matches!(last_token_index(&[0, 0]), Err(ModelError::EmptySequence)));
        assert!(matches!(last_token_index(&[1, 0, 1]), Err(ModelError::InvalidMask(_))));

        let mut g = Graph::new();
        let rows: Vec<Vec<f64>> = (0..3).map(|r| vec![r as f64 * 10.0 + 1.0; 4]).collect();
        let h = g.constant(Tensor::from_rows(&rows).unwrap());
        let p = pool_last_token(&mut g, h, &[1, 0, 0]).unwrap();
        assert_eq!(g.value(p).data(), &[1.0; 4]);
    }

    #[test]
    fn expert_zero_cases() {
        let mut g = Graph::new();
        let w = |g: &mut Graph, r, c, v: f64| g.constant(Tensor::full(vec![r, c], v));
        let e = ExpertVars {
            w1: w(&mut g, 3, 5, 0.3),
            w2: w(&mut g, 5, 3, -0.2),
            w3: w(&mut g, 3, 5, 0.1),
        };
        let x0 = g.constant(Tensor::zeros(vec![1, 3]));
        let y = expert_forward(&mut g, x0, &e).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let e0 = ExpertVars {
            w3: w(&mut g, 3, 5, 0.0),
            ..e
        };
        let x = g.constant(Tensor::full(vec![2, 3], 1.5));
        let y = expert_forward(&mut g, x, &e0).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn causal_bias_masks_future_and_padding() {
        let b = attention_bias(&[1, 1, 0], AttentionMode::Causal);
        assert_eq!(b.row(0)[1], f64::NEG_INFINITY);
        assert_eq!(b.row(1)[0], 0.0);
        assert_eq!(b.row(2)[2], f64::NEG_INFINITY);
        let b = attention_bias(&[1, 1, 0], AttentionMode::Bidirectional);
        assert_eq!(b.row(0)[1], 0.0);
        assert_eq!(b.row(0)[2], f64::NEG_INFINITY);
    }
}
