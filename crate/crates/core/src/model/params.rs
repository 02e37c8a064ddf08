use std::collections::HashMap;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::ModelConfig;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Named parameter tensors in a fixed, config-derived order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.entries[i].1 = value;
        } else {
            self.index.insert(name.clone(), self.entries.len());
            self.entries.push((name, value));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }
}

/// Parameter names and shapes for a config, in storage order.
pub fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.model_dim;
    let mut out = vec![
        ("embed.table".to_string(), vec![cfg.vocab_size, cfg.embed_dim]),
        ("embed.proj".to_string(), vec![cfg.embed_dim, d]),
    ];
    let expert = |out: &mut Vec<(String, Vec<usize>)>, prefix: String| {
        out.push((format!("{prefix}.w1"), vec![d, cfg.expert_hidden_dim]));
        out.push((format!("{prefix}.w3"), vec![d, cfg.expert_hidden_dim]));
        out.push((format!("{prefix}.w2"), vec![cfg.expert_hidden_dim, d]));
    };
    for l in 0..cfg.num_layers {
        let p = format!("layers.{l}");
        out.push((format!("{p}.attn_norm"), vec![d]));
        out.push((format!("{p}.attn.wq"), vec![d, cfg.query_heads * cfg.head_dim]));
        out.push((format!("{p}.attn.wk"), vec![d, cfg.kv_groups * cfg.head_dim]));
        out.push((format!("{p}.attn.wv"), vec![d, cfg.kv_groups * cfg.head_dim]));
        out.push((format!("{p}.attn.wo"), vec![cfg.query_heads * cfg.head_dim, d]));
        out.push((format!("{p}.ffn_norm"), vec![d]));
        out.push((format!("{p}.moe.gate"), vec![d, cfg.num_routed_experts]));
        for e in 0..cfg.num_routed_experts {
            expert(&mut out, format!("{p}.moe.experts.{e}"));
        }
        for s in 0..cfg.num_shared_experts {
            expert(&mut out, format!("{p}.moe.shared.{s}"));
        }
    }
    out.push(("final_norm".to_string(), vec![d]));
    out.push(("head.binary".to_string(), vec![d, 2]));
    out.push(("head.cwe".to_string(), vec![d, cfg.num_cwe_classes]));
    out
}

pub(crate) fn is_norm_scale(name: &str) -> bool {
    name.ends_with("_norm")
}

/// Normal(0, std) truncated to two standard deviations by rejection.
pub fn truncated_normal(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            data.push(z * std);
        }
    }
    Tensor::new(shape, data).expect("shape product")
}

/// Truncated-normal matrices and unit RMSNorm scales.
pub fn init_params(cfg: &ModelConfig, rng: &mut Rng) -> ParamStore {
    let mut store = ParamStore::new();
    for (name, shape) in layout(cfg) {
        let t = if is_norm_scale(&name) {
            Tensor::full(shape, 1.0)
        } else {
            truncated_normal(shape, cfg.init_std, rng)
        };
        store.insert(name, t);
    }
    store
}

/// Fresh classification head for the CWE classes.
pub fn fresh_cwe_head(cfg: &ModelConfig, rng: &mut Rng) -> Tensor {
    // burn one draw so the head differs from any init that reused this stream
    let _: u64 = rng.random();
    truncated_normal(vec![cfg.model_dim, cfg.num_cwe_classes], cfg.init_std, rng)
}
