use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    #[default]
    Bidirectional,
    Causal,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub query_heads: usize,
    pub kv_groups: usize,
    pub head_dim: usize,
    pub rope_base: f64,
    pub rmsnorm_eps: f64,
    pub num_routed_experts: usize,
    pub active_experts: usize,
    pub num_shared_experts: usize,
    pub expert_hidden_dim: usize,
    pub num_cwe_classes: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    #[serde(default)]
    pub attention_mode: AttentionMode,
    /// Standard deviation of the truncated-normal initializer.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// Weight of the optional switch-style load-balancing loss (0 disables it).
    #[serde(default)]
    pub balance_loss_weight: f64,
}

fn default_init_std() -> f64 {
    0.02
}

pub const PRESET_NAMES: &[&str] = &["paper", "ablation2", "ablation3", "desk", "tiny"];

impl ModelConfig {
    /// Full-size baseline: 8 layers, 12 query heads in 4 KV groups, 25 routed
    /// experts with top-1 routing plus one shared expert.
    pub fn paper() -> Self {
        Self {
            vocab_size: 151_673,
            embed_dim: 2048,
            model_dim: 768,
            num_layers: 8,
            query_heads: 12,
            kv_groups: 4,
            head_dim: 64,
            rope_base: 1_000_000.0,
            rmsnorm_eps: 1e-6,
            num_routed_experts: 25,
            active_experts: 1,
            num_shared_experts: 1,
            expert_hidden_dim: 768,
            num_cwe_classes: 25,
            max_seq_len: 1024,
            dropout: 0.1,
            attention_mode: AttentionMode::Bidirectional,
            init_std: 0.02,
            balance_loss_weight: 0.0,
        }
    }

    /// Fine-grained experts: 50 routed experts of width 384, two active.
    pub fn ablation2() -> Self {
        Self {
            num_routed_experts: 50,
            expert_hidden_dim: 384,
            active_experts: 2,
            ..Self::paper()
        }
    }

    /// Heavy shared backbone: routed experts of width 256 and four shared experts.
    pub fn ablation3() -> Self {
        Self {
            expert_hidden_dim: 256,
            num_shared_experts: 4,
            ..Self::paper()
        }
    }

    /// Desk-scale training preset. Same structure, small dimensions.
    pub fn desk() -> Self {
        Self {
            vocab_size: 1024,
            embed_dim: 32,
            model_dim: 32,
            num_layers: 2,
            query_heads: 4,
            kv_groups: 2,
            head_dim: 8,
            rope_base: 1_000_000.0,
            rmsnorm_eps: 1e-6,
            num_routed_experts: 4,
            active_experts: 1,
            num_shared_experts: 1,
            expert_hidden_dim: 32,
            num_cwe_classes: 25,
            max_seq_len: 256,
            dropout: 0.1,
            attention_mode: AttentionMode::Bidirectional,
            init_std: 0.02,
            balance_loss_weight: 0.0,
        }
    }

    /// Smallest preset, used for end-to-end gradient checks.
    pub fn tiny() -> Self {
        Self {
            vocab_size: 17,
            embed_dim: 6,
            model_dim: 8,
            num_layers: 2,
            query_heads: 2,
            kv_groups: 1,
            head_dim: 4,
            rope_base: 1_000_000.0,
            rmsnorm_eps: 1e-6,
            num_routed_experts: 3,
            active_experts: 1,
            num_shared_experts: 1,
            expert_hidden_dim: 8,
            num_cwe_classes: 5,
            max_seq_len: 16,
            dropout: 0.0,
            attention_mode: AttentionMode::Bidirectional,
            init_std: 0.02,
            balance_loss_weight: 0.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self, ModelError> {
        match name {
            "paper" => Ok(Self::paper()),
            "ablation2" => Ok(Self::ablation2()),
            "ablation3" => Ok(Self::ablation3()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(ModelError::UnknownPreset {
                name: other.to_string(),
                available: PRESET_NAMES.join(", "),
            }),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.query_heads == 0 || self.kv_groups == 0 {
            return fail("query_heads and kv_groups must be positive".into());
        }
        if self.query_heads % self.kv_groups != 0 {
            return fail(format!(
                "query_heads ({}) must be a multiple of kv_groups ({})",
                self.query_heads, self.kv_groups
            ));
        }
        if self.query_heads * self.head_dim != self.model_dim {
            return fail(format!(
                "query_heads * head_dim ({} * {}) must equal model_dim ({})",
                self.query_heads, self.head_dim, self.model_dim
            ));
        }
        if self.head_dim % 2 != 0 {
            return fail(format!("head_dim ({}) must be even for rotary embedding", self.head_dim));
        }
        if self.active_experts == 0 || self.active_experts > self.num_routed_experts {
            return fail(format!(
                "active_experts ({}) must lie in 1..={}",
                self.active_experts, self.num_routed_experts
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout ({}) must lie in [0, 1)", self.dropout));
        }
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("model_dim", self.model_dim),
            ("expert_hidden_dim", self.expert_hidden_dim),
            ("num_cwe_classes", self.num_cwe_classes),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{name} must be positive"));
        }
        if self.rope_base <= 0.0 || self.rmsnorm_eps < 0.0 || self.init_std <= 0.0 {
            return fail("rope_base and init_std must be positive, rmsnorm_eps non-negative".into());
        }
        Ok(())
    }

    /// Query heads sharing each key/value head.
    pub fn heads_per_group(&self) -> usize {
        self.query_heads / self.kv_groups
    }
}
