use super::{axis_split, sigmoid_scalar, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    MulCol { a: Var, col: Var },
    Affine { a: Var, alpha: f64 },
    Silu { a: Var },
    Sigmoid { a: Var },
    Ln { a: Var },
    Clamp { a: Var, lo: f64, hi: f64 },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    RmsNorm { x: Var, gamma: Var, inv_rms: Vec<f64> },
    Rope { a: Var, cos: Vec<f64>, sin: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatCols { parts: Vec<(Var, usize)> },
    ConcatRows { parts: Vec<(Var, usize)> },
    SliceCols { a: Var, start: usize },
    SelectRows { a: Var, idx: Vec<usize> },
    ScatterRows { a: Var, idx: Vec<usize> },
    Pick { a: Var, idx: Vec<usize> },
    Transpose { a: Var, rows: usize, cols: usize },
    Sum { a: Var },
    Mean { a: Var },
    Reshape { a: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Append-only computation tape. Node order is a valid topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::Rank {
            op,
            expected: 2,
            shape: s.to_vec(),
        }),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// out[m×n] += a[m×k] · b[k×n]
fn gemm_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Registers a leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    // ----- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.affine(b, -1.0, 0.0);
        self.add(a, nb)
    }

    /// Adds a vector along the trailing axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(bias).shape() != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + b[i % cols])
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddBias { a, bias }, &[a, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    /// Scales row `r` of the matrix `a` by `col[r]`, where `col` is `[rows, 1]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = matrix_dims("mul_col", self.value(a))?;
        if self.value(col).shape() != [m, 1] {
            return Err(TensorError::ShapeMismatch {
                op: "mul_col",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(col).shape().to_vec(),
            });
        }
        let c = self.value(col).data().to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * c[i / n])
            .collect();
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::MulCol { a, col }, &[a, col]))
    }

    /// `alpha * a + beta`, elementwise.
    pub fn affine(&mut self, a: Var, alpha: f64, beta: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| alpha * x + beta).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Affine { a, alpha }, &[a])
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        self.affine(a, alpha, 0.0)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x * sigmoid_scalar(x))
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Silu { a }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| sigmoid_scalar(x)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Sigmoid { a }, &[a])
    }

    /// Natural logarithm. Callers clamp inputs away from zero first.
    pub fn ln(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| x.ln()).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Ln { a }, &[a])
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x.clamp(lo, hi)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Clamp { a, lo, hi }, &[a])
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_split(self.value(a).shape(), axis)?;
        if len == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax" });
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for k in 0..len {
                    let e = (x[at(k)] - max).exp();
                    out[at(k)] = e;
                    sum += e;
                }
                for k in 0..len {
                    out[at(k)] /= sum;
                }
            }
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax { a, outer, len, inner }, &[a]))
    }

    /// Row-wise `x / sqrt(mean(x^2) + eps) * gamma` over the trailing axis.
    pub fn rms_norm(&mut self, x: Var, gamma: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if d == 0 {
            return Err(TensorError::EmptyAxis { op: "rms_norm" });
        }
        if self.value(gamma).shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "rms_norm",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        let rows = self.value(x).rows();
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let mut out = vec![0.0; xs.len()];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..d {
                out[r * d + j] = row[j] * inv * g[j];
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(t, Op::RmsNorm { x, gamma, inv_rms }, &[x, gamma]))
    }

    /// Rotates consecutive column pairs of row `r` by `angle(r, pair)`.
    pub fn rotate_pairs(&mut self, a: Var, angle: impl Fn(usize, usize) -> f64) -> Result<Var> {
        let (rows, d) = matrix_dims("rope", self.value(a))?;
        if d % 2 != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "rope (odd head dim)",
                lhs: vec![rows, d],
                rhs: vec![2],
            });
        }
        let half = d / 2;
        let mut cos = Vec::with_capacity(rows * half);
        let mut sin = Vec::with_capacity(rows * half);
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            for k in 0..half {
                let (s, c) = angle(r, k).sin_cos();
                cos.push(c);
                sin.push(s);
                let x0 = x[r * d + 2 * k];
                let x1 = x[r * d + 2 * k + 1];
                out[r * d + 2 * k] = x0 * c - x1 * s;
                out[r * d + 2 * k + 1] = x0 * s + x1 * c;
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(t, Op::Rope { a, cos, sin }, &[a]))
    }

    /// Gathers rows of `table` (`[vocab, dim]`) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = matrix_dims("embedding", self.value(table))?;
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    extent: vocab,
                });
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let t = Tensor::new(vec![ids.len(), dim], out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::EmptyAxis { op: "concat" })?;
        let (rows, _) = matrix_dims("concat", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims("concat", self.value(p))?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            widths.push((p, c));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, _) in &widths {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(t, Op::ConcatCols { parts: widths }, parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::EmptyAxis { op: "concat" })?;
        let (_, cols) = matrix_dims("concat", self.value(first))?;
        let mut heights = Vec::with_capacity(parts.len());
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = matrix_dims("concat", self.value(p))?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            heights.push((p, r));
            out.extend_from_slice(self.value(p).data());
        }
        let total: usize = heights.iter().map(|h| h.1).sum();
        let t = Tensor::new(vec![total, cols], out)?;
        Ok(self.push(t, Op::ConcatRows { parts: heights }, parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = matrix_dims("slice_cols", self.value(a))?;
        if start + len > cols {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                extent: cols,
            });
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&self.value(a).row(r)[start..start + len]);
        }
        let t = Tensor::new(vec![rows, len], out)?;
        Ok(self.push(t, Op::SliceCols { a, start }, &[a]))
    }

    /// Gathers the listed rows of a matrix (repeats allowed).
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = matrix_dims("select_rows", self.value(a))?;
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "select_rows",
                    index: i,
                    extent: rows,
                });
            }
            out.extend_from_slice(self.value(a).row(i));
        }
        let t = Tensor::new(vec![idx.len(), cols], out)?;
        Ok(self.push(t, Op::SelectRows { a, idx: idx.to_vec() }, &[a]))
    }

    /// Places row `i` of `a` at row `idx[i]` of a zero `[n_rows, cols]` matrix.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let (rows, cols) = matrix_dims("scatter_rows", self.value(a))?;
        if rows != idx.len() {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_rows",
                lhs: vec![rows, cols],
                rhs: vec![idx.len()],
            });
        }
        let mut out = vec![0.0; n_rows * cols];
        for (i, &target) in idx.iter().enumerate() {
            if target >= n_rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "scatter_rows",
                    index: target,
                    extent: n_rows,
                });
            }
            out[target * cols..(target + 1) * cols].copy_from_slice(self.value(a).row(i));
        }
        let t = Tensor::new(vec![n_rows, cols], out)?;
        Ok(self.push(t, Op::ScatterRows { a, idx: idx.to_vec() }, &[a]))
    }

    /// Picks flat elements of `a` into a `[len, 1]` column.
    pub fn pick(&mut self, a: Var, flat_idx: &[usize]) -> Result<Var> {
        let n = self.value(a).numel();
        let mut out = Vec::with_capacity(flat_idx.len());
        for &i in flat_idx {
            if i >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick",
                    index: i,
                    extent: n,
                });
            }
            out.push(self.value(a).data()[i]);
        }
        let t = Tensor::new(vec![flat_idx.len(), 1], out)?;
        Ok(self.push(
            t,
            Op::Pick {
                a,
                idx: flat_idx.to_vec(),
            },
            &[a],
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = matrix_dims("transpose", self.value(a))?;
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = x[r * cols + c];
            }
        }
        let t = Tensor::new(vec![cols, rows], out)?;
        Ok(self.push(t, Op::Transpose { a, rows, cols }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.value(a).data().iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), Op::Mean { a }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { a }, &[a]))
    }

    // ----- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar root. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: self.value(root).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.nodes[i].grad {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if needs(*a) {
                    // da = g · bᵀ
                    let bv = nodes[b.0].value.data();
                    acc(*a, &mut |da| {
                        for r in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for c in 0..n {
                                    s += g[r * n + c] * bv[p * n + c];
                                }
                                da[r * k + p] += s;
                            }
                        }
                    });
                }
                if needs(*b) {
                    // db = aᵀ · g
                    let av = nodes[a.0].value.data();
                    acc(*b, &mut |db| {
                        for r in 0..m {
                            for p in 0..k {
                                let x = av[r * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                for c in 0..n {
                                    db[p * n + c] += x * g[r * n + c];
                                }
                            }
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::AddBias { a, bias } => {
                acc(*a, &mut |d| add_into(d, g));
                let cols = nodes[bias.0].value.numel();
                acc(*bias, &mut |d| {
                    for (j, gv) in g.iter().enumerate() {
                        d[j % cols] += gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * bv[j];
                    }
                });
                acc(*b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * av[j];
                    }
                });
            }
            Op::MulCol { a, col } => {
                let av = nodes[a.0].value.data();
                let cv = nodes[col.0].value.data();
                let n = nodes[a.0].value.cols();
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * cv[j / n];
                    }
                });
                acc(*col, &mut |d| {
                    for j in 0..g.len() {
                        d[j / n] += g[j] * av[j];
                    }
                });
            }
            Op::Affine { a, alpha } => {
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += alpha * g[j];
                    }
                });
            }
            Op::Silu { a } => {
                let xv = nodes[a.0].value.data();
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        let s = sigmoid_scalar(xv[j]);
                        d[j] += g[j] * s * (1.0 + xv[j] * (1.0 - s));
                    }
                });
            }
            Op::Sigmoid { a } => {
                let y = out.data();
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                });
            }
            Op::Ln { a } => {
                let xv = nodes[a.0].value.data();
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] / xv[j];
                    }
                });
            }
            Op::Clamp { a, lo, hi } => {
                let xv = nodes[a.0].value.data();
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        if xv[j] >= *lo && xv[j] <= *hi {
                            d[j] += g[j];
                        }
                    }
                });
            }
            Op::Softmax {
                a,
                outer,
                len,
                inner,
            } => {
                let y = out.data();
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*a, &mut |d| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + ii;
                            let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                d[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::RmsNorm { x, gamma, inv_rms } => {
                let xv = nodes[x.0].value.data();
                let gm = nodes[gamma.0].value.data();
                let dim = gm.len();
                acc(*x, &mut |dx| {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let base = r * dim;
                        let dot: f64 = (0..dim).map(|j| g[base + j] * gm[j] * xv[base + j]).sum();
                        let coef = inv * inv * inv * dot / dim as f64;
                        for j in 0..dim {
                            dx[base + j] += inv * gm[j] * g[base + j] - coef * xv[base + j];
                        }
                    }
                });
                acc(*gamma, &mut |dg| {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for j in 0..dim {
                            dg[j] += g[r * dim + j] * xv[r * dim + j] * inv;
                        }
                    }
                });
            }
            Op::Rope { a, cos, sin } => {
                let d = out.cols();
                let half = d / 2;
                acc(*a, &mut |dx| {
                    for (p, (&c, &s)) in cos.iter().zip(sin).enumerate() {
                        let r = p / half;
                        let k = p % half;
                        let i0 = r * d + 2 * k;
                        let (g0, g1) = (g[i0], g[i0 + 1]);
                        dx[i0] += g0 * c + g1 * s;
                        dx[i0 + 1] += -g0 * s + g1 * c;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let dim = out.cols();
                acc(*table, &mut |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for &(p, w) in parts {
                    acc(p, &mut |d| {
                        for r in 0..rows {
                            add_into(
                                &mut d[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows { parts } => {
                let cols = out.cols();
                let mut offset = 0;
                for &(p, h) in parts {
                    acc(p, &mut |d| add_into(d, &g[offset * cols..(offset + h) * cols]));
                    offset += h;
                }
            }
            Op::SliceCols { a, start } => {
                let len = out.cols();
                let cols = nodes[a.0].value.cols();
                acc(*a, &mut |d| {
                    for r in 0..out.rows() {
                        add_into(
                            &mut d[r * cols + start..r * cols + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                });
            }
            Op::SelectRows { a, idx } => {
                let cols = out.cols();
                acc(*a, &mut |d| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut d[src * cols..(src + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::ScatterRows { a, idx } => {
                let cols = out.cols();
                acc(*a, &mut |d| {
                    for (r, &dst) in idx.iter().enumerate() {
                        add_into(&mut d[r * cols..(r + 1) * cols], &g[dst * cols..(dst + 1) * cols]);
                    }
                });
            }
            Op::Pick { a, idx } => {
                acc(*a, &mut |d| {
                    for (j, &src) in idx.iter().enumerate() {
                        d[src] += g[j];
                    }
                });
            }
            Op::Transpose { a, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                acc(*a, &mut |d| {
                    for r in 0..rows {
                        for c in 0..cols {
                            d[r * cols + c] += g[c * rows + r];
                        }
                    }
                });
            }
            Op::Sum { a } => {
                acc(*a, &mut |d| d.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::Mean { a } => {
                let n = nodes[a.0].value.numel().max(1) as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::Reshape { a } => {
                acc(*a, &mut |d| add_into(d, g));
            }
        }
    }
}
