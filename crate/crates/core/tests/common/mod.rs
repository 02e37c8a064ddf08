//! Plain-loop reference implementations used as oracles by several test targets.
#![allow(dead_code)]

use rand::Rng as _;
use vulnmoe::rng::Rng;
use vulnmoe::tensor::Tensor;

pub fn random(shape: &[usize], scale: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn matmul(a: &[Vec<f64>], b: &Tensor) -> Vec<Vec<f64>> {
    let (k, n) = (b.rows(), b.cols());
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| (0..k).map(|t| row[t] * b.data()[t * n + j]).sum())
                .collect()
        })
        .collect()
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Rotary embedding via complex multiplication `z * e^{i m theta_k}`.
pub fn rope_ref(v: &[f64], pos: usize, base: f64) -> Vec<f64> {
    let d = v.len();
    let mut out = vec![0.0; d];
    for k in 0..d / 2 {
        let theta = pos as f64 / base.powf(2.0 * k as f64 / d as f64);
        let (re, im) = (v[2 * k], v[2 * k + 1]);
        let (c, s) = (theta.cos(), theta.sin());
        out[2 * k] = re * c - im * s;
        out[2 * k + 1] = re * s + im * c;
    }
    out
}

/// Multi-head attention with one key/value head per query head.
pub struct Mha<'a> {
    pub wq: &'a Tensor,
    pub wk: &'a Tensor,
    pub wv: &'a Tensor,
    pub wo: &'a Tensor,
    pub heads: usize,
    pub head_dim: usize,
    pub base: f64,
}

impl Mha<'_> {
    pub fn forward(&self, x: &[Vec<f64>], mask: &[u8], causal: bool) -> Vec<Vec<f64>> {
        let (q, k, v) = (matmul(x, self.wq), matmul(x, self.wk), matmul(x, self.wv));
        let n = x.len();
        let dk = self.head_dim;
        let mut concat = vec![vec![0.0; self.heads * dk]; n];
        for h in 0..self.heads {
            let cols = h * dk..(h + 1) * dk;
            let qh: Vec<Vec<f64>> = (0..n).map(|i| rope_ref(&q[i][cols.clone()], i, self.base)).collect();
            let kh: Vec<Vec<f64>> = (0..n).map(|i| rope_ref(&k[i][cols.clone()], i, self.base)).collect();
            for i in 0..n {
                let allowed: Vec<usize> = (0..n).filter(|&j| mask[j] != 0 && (!causal || j <= i)).collect();
                let scores: Vec<f64> = allowed
                    .iter()
                    .map(|&j| qh[i].iter().zip(&kh[j]).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (w, &j) in e.iter().zip(&allowed) {
                    for c in 0..dk {
                        concat[i][h * dk + c] += w / z * v[j][h * dk + c];
                    }
                }
            }
        }
        matmul(&concat, self.wo)
    }
}

/// Expands grouped K/V projection columns so query head `h` gets its own
/// copy of group `h / (H / G)`.
pub fn replicate_kv(w: &Tensor, heads: usize, groups: usize, head_dim: usize) -> Tensor {
    let per = heads / groups;
    let d = w.rows();
    let mut data = Vec::with_capacity(d * heads * head_dim);
    for r in 0..d {
        let row = w.row(r);
        for h in 0..heads {
            let g = h / per;
            data.extend_from_slice(&row[g * head_dim..(g + 1) * head_dim]);
        }
    }
    Tensor::new(vec![d, heads * head_dim], data).unwrap()
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
