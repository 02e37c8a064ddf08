//! Encoder architecture: token embedding and projection, a stack of pre-norm
//! blocks (grouped-query attention with rotary positions, then a sparse
//! mixture-of-experts SwiGLU feed-forward), final RMSNorm, last-token pooling
//! and two linear heads (binary vulnerability, multi-label CWE).

mod checkpoint;
mod config;
mod count;
pub mod layers;
mod params;
pub mod tokenizer;

pub use checkpoint::{canonical_json, load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{AttentionMode, ModelConfig, PRESET_NAMES};
pub use count::{count_parameters, ParamCount};
pub use layers::{
    apply_rope, gqa_attention, inverse_frequency, moe_forward, pool_last_token, rope_angle,
    AttentionShape, AttentionVars, ExpertVars, MoeVars, TokenRouting,
};
pub use params::{fresh_cwe_head, init_params, layout, truncated_normal, ParamStore};

use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("unknown preset `{name}` (available: {available})")]
    UnknownPreset { name: String, available: String },
    #[error("{0}")]
    Range(String),
    #[error("empty sequence: mask has no unpadded positions")]
    EmptySequence,
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A padded batch of token sequences with 1/0 masks (padding is a suffix).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<Vec<u32>>,
    pub masks: Vec<Vec<u8>>,
}

impl Batch {
    /// Pads sequences with id 0 to the longest length in the batch.
    pub fn from_sequences(seqs: &[Vec<u32>]) -> Self {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(seqs.len());
        let mut masks = Vec::with_capacity(seqs.len());
        for s in seqs {
            let mut t = s.clone();
            t.resize(len, 0);
            let mut m = vec![1u8; s.len()];
            m.resize(len, 0);
            tokens.push(t);
            masks.push(m);
        }
        Self { tokens, masks }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub enum ForwardMode<'a> {
    Eval,
    /// Dropout active, drawing masks from the given stream.
    Train(&'a mut Rng),
}

/// Per-layer graph handles.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub attn_norm: Var,
    pub attn: AttentionVars,
    pub ffn_norm: Var,
    pub moe: MoeVars,
}

/// All parameters registered on a graph, in [`ParamStore`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
    pub embed_table: Var,
    pub embed_proj: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub head_binary: Var,
    pub head_cwe: Var,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// `[batch, 2]`; column 1 is the vulnerable class.
    pub binary_logits: Var,
    /// `[batch, num_cwe_classes]`.
    pub cwe_logits: Var,
    /// `routing[sample][layer][token]`.
    pub routing: Vec<Vec<Vec<TokenRouting>>>,
    /// Pooled final representations, `[batch, d_model]`.
    pub pooled: Var,
    /// Switch-style load-balancing term when enabled in the config.
    pub balance_loss: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let params = init_params(&config, rng);
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        for (name, shape) in layout(&config) {
            let t = params
                .get(&name)
                .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    /// Registers every parameter as a trainable leaf on `g`.
    pub fn bind(&self, g: &mut Graph) -> Result<BoundParams, ModelError> {
        self.bind_with(g, true)
    }

    fn bind_with(&self, g: &mut Graph, trainable: bool) -> Result<BoundParams, ModelError> {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let get = |name: &str| -> Result<Var, ModelError> {
            self.params
                .position(name)
                .map(|i| vars[i])
                .ok_or_else(|| ModelError::MissingParam(name.to_string()))
        };
        let expert = |prefix: String| -> Result<ExpertVars, ModelError> {
            Ok(ExpertVars {
                w1: get(&format!("{prefix}.w1"))?,
                w2: get(&format!("{prefix}.w2"))?,
                w3: get(&format!("{prefix}.w3"))?,
            })
        };
        let cfg = &self.config;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let p = format!("layers.{l}");
            layers.push(LayerVars {
                attn_norm: get(&format!("{p}.attn_norm"))?,
                attn: AttentionVars {
                    wq: get(&format!("{p}.attn.wq"))?,
                    wk: get(&format!("{p}.attn.wk"))?,
                    wv: get(&format!("{p}.attn.wv"))?,
                    wo: get(&format!("{p}.attn.wo"))?,
                },
                ffn_norm: get(&format!("{p}.ffn_norm"))?,
                moe: MoeVars {
                    gate: get(&format!("{p}.moe.gate"))?,
                    experts: (0..cfg.num_routed_experts)
                        .map(|e| expert(format!("{p}.moe.experts.{e}")))
                        .collect::<Result<_, _>>()?,
                    shared: (0..cfg.num_shared_experts)
                        .map(|s| expert(format!("{p}.moe.shared.{s}")))
                        .collect::<Result<_, _>>()?,
                },
            });
        }
        Ok(BoundParams {
            embed_table: get("embed.table")?,
            embed_proj: get("embed.proj")?,
            layers,
            final_norm: get("final_norm")?,
            head_binary: get("head.binary")?,
            head_cwe: get("head.cwe")?,
            vars,
        })
    }

    fn attention_shape(&self) -> AttentionShape {
        AttentionShape {
            query_heads: self.config.query_heads,
            kv_groups: self.config.kv_groups,
            head_dim: self.config.head_dim,
            rope_base: self.config.rope_base,
            mode: self.config.attention_mode,
        }
    }

    /// Runs one sequence through embedding and all blocks; returns the
    /// final-normed hidden states `[seq, d_model]` and the routing trace.
    pub fn encode(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        tokens: &[u32],
        mask: &[u8],
        mode: &mut ForwardMode<'_>,
    ) -> Result<(Var, Vec<Vec<TokenRouting>>, Vec<Var>), ModelError> {
        let cfg = &self.config;
        if tokens.len() != mask.len() {
            return Err(ModelError::InvalidMask(format!(
                "{} tokens with a mask of length {}",
                tokens.len(),
                mask.len()
            )));
        }
        if tokens.len() > cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: cfg.max_seq_len,
            });
        }
        layers::last_token_index(mask)?;
        let mut ids = Vec::with_capacity(tokens.len());
        for &t in tokens {
            if t as usize >= cfg.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    id: t,
                    vocab: cfg.vocab_size,
                });
            }
            ids.push(t as usize);
        }
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let shape = self.attention_shape();

        let emb = g.embedding(p.embed_table, &ids)?;
        let mut h = g.matmul(emb, p.embed_proj)?;
        let mut trace = Vec::with_capacity(cfg.num_layers);
        let mut gate_nodes = Vec::with_capacity(cfg.num_layers);
        for layer in &p.layers {
            let normed = g.rms_norm(h, layer.attn_norm, cfg.rmsnorm_eps)?;
            let mut attn = gqa_attention(g, normed, &layer.attn, &shape, mask, &positions)?;
            if let ForwardMode::Train(rng) = mode {
                attn = layers::dropout(g, attn, cfg.dropout, rng)?;
            }
            h = g.add(h, attn)?;

            let normed = g.rms_norm(h, layer.ffn_norm, cfg.rmsnorm_eps)?;
            let moe = moe_forward(g, normed, &layer.moe, cfg.active_experts)?;
            let mut ffn = moe.output;
            if let ForwardMode::Train(rng) = mode {
                ffn = layers::dropout(g, ffn, cfg.dropout, rng)?;
            }
            h = g.add(h, ffn)?;
            trace.push(moe.routing);
            gate_nodes.push(moe.gates);
        }
        let h = g.rms_norm(h, p.final_norm, cfg.rmsnorm_eps)?;
        Ok((h, trace, gate_nodes))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        batch: &Batch,
        mut mode: ForwardMode<'_>,
    ) -> Result<ForwardOutput, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let mut pooled_rows = Vec::with_capacity(batch.len());
        let mut routing = Vec::with_capacity(batch.len());
        let mut balance_terms = Vec::new();
        for (tokens, mask) in batch.tokens.iter().zip(&batch.masks) {
            let (h, trace, gates) = self.encode(g, p, tokens, mask, &mut mode)?;
            pooled_rows.push(pool_last_token(g, h, mask)?);
            if self.config.balance_loss_weight > 0.0 {
                for (layer_gates, layer_trace) in gates.iter().zip(&trace) {
                    balance_terms.push(self.balance_term(g, *layer_gates, layer_trace, mask)?);
                }
            }
            routing.push(trace);
        }
        let pooled = g.concat_rows(&pooled_rows)?;
        let binary_logits = g.matmul(pooled, p.head_binary)?;
        let cwe_logits = g.matmul(pooled, p.head_cwe)?;
        let balance_loss = if balance_terms.is_empty() {
            None
        } else {
            let col = g.concat_rows(&balance_terms)?;
            let m = g.mean(col);
            Some(g.scale(m, self.config.balance_loss_weight))
        };
        Ok(ForwardOutput {
            binary_logits,
            cwe_logits,
            routing,
            pooled,
            balance_loss,
        })
    }

    /// `E * sum_e f_e * P_e` over unpadded tokens, where `f_e` is the
    /// (detached) fraction of routed slots and `P_e` the mean gate value.
    fn balance_term(
        &self,
        g: &mut Graph,
        gates: Var,
        trace: &[TokenRouting],
        mask: &[u8],
    ) -> Result<Var, ModelError> {
        let e = self.config.num_routed_experts;
        let live: Vec<usize> = (0..mask.len()).filter(|&t| mask[t] != 0).collect();
        let mut frac = vec![0.0; e];
        for &t in &live {
            for &(ex, _) in &trace[t].selected {
                frac[ex] += 1.0;
            }
        }
        let slots = (live.len() * self.config.active_experts) as f64;
        let mut weights = vec![0.0; live.len() * e];
        for (r, _) in live.iter().enumerate() {
            for ex in 0..e {
                weights[r * e + ex] = e as f64 * frac[ex] / slots / live.len() as f64;
            }
        }
        let sel = g.select_rows(gates, &live)?;
        let w = g.constant(Tensor::new(vec![live.len(), e], weights)?);
        let prod = g.mul(sel, w)?;
        let s = g.sum(prod);
        Ok(g.reshape(s, vec![1, 1])?)
    }

    /// Eval-mode probabilities: `(p_vulnerable, cwe sigmoid probabilities)` per sample.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<(f64, Vec<f64>)>, ModelError> {
        let mut g = Graph::new();
        let p = self.bind_constants(&mut g)?;
        let out = self.forward(&mut g, &p, batch, ForwardMode::Eval)?;
        let bin = g.value(out.binary_logits).clone();
        let cwe = g.value(out.cwe_logits).clone();
        Ok((0..batch.len())
            .map(|i| {
                let r = bin.row(i);
                let p_vul = crate::tensor::sigmoid_scalar(r[1] - r[0]);
                let probs = cwe.row(i).iter().map(|&z| crate::tensor::sigmoid_scalar(z)).collect();
                (p_vul, probs)
            })
            .collect())
    }

    /// Like [`Model::bind`] but registers parameters as constants, so
    /// inference does no gradient bookkeeping.
    pub fn bind_constants(&self, g: &mut Graph) -> Result<BoundParams, ModelError> {
        self.bind_with(g, false)
    }
}
