use serde::Serialize;

use super::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: u64,
    /// Parameters touched per token: everything except the routed experts
    /// that are not selected.
    pub active: u64,
}

/// Closed-form parameter count for a config (no allocation).
pub fn count_parameters(cfg: &ModelConfig) -> ParamCount {
    let c = |x: usize| x as u64;
    let d = c(cfg.model_dim);
    let embedding = c(cfg.vocab_size) * c(cfg.embed_dim) + c(cfg.embed_dim) * d;
    let attention = d * c(cfg.query_heads * cfg.head_dim) * 2 + d * c(cfg.kv_groups * cfg.head_dim) * 2;
    let norms = 2 * d;
    let gate = d * c(cfg.num_routed_experts);
    let expert = 3 * d * c(cfg.expert_hidden_dim);
    let shared = c(cfg.num_shared_experts) * expert;
    let heads = d * 2 + d * c(cfg.num_cwe_classes);
    let fixed = embedding + d + heads;

    let layer_total = attention + norms + gate + c(cfg.num_routed_experts) * expert + shared;
    let layer_active = attention + norms + gate + c(cfg.active_experts) * expert + shared;
    ParamCount {
        total: fixed + c(cfg.num_layers) * layer_total,
        active: fixed + c(cfg.num_layers) * layer_active,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layout;

    #[test]
    fn matches_layout_enumeration() {
        for cfg in [ModelConfig::tiny(), ModelConfig::desk(), ModelConfig::ablation2()] {
            let from_layout: u64 = layout(&cfg)
                .iter()
                .map(|(_, s)| s.iter().product::<usize>() as u64)
                .sum();
            assert_eq!(count_parameters(&cfg).total, from_layout);
        }
    }

    #[test]
    fn degenerate_config_hand_count() {
        // vocab 10, every width 4, one layer, two routed experts (one active),
        // one shared expert, two CWE classes
        let cfg = ModelConfig {
            vocab_size: 10,
            embed_dim: 4,
            model_dim: 4,
            num_layers: 1,
            query_heads: 2,
            kv_groups: 1,
            head_dim: 2,
            num_routed_experts: 2,
            active_experts: 1,
            num_shared_experts: 1,
            expert_hidden_dim: 4,
            num_cwe_classes: 2,
            max_seq_len: 8,
            ..ModelConfig::tiny()
        };
        // embedding 40 + projection 16
        // attention: wq 16 + wk 8 + wv 8 + wo 16 = 48; norms 8; gate 8
        // experts: 3 * 16 = 48 each, 2 routed + 1 shared = 144
        // final norm 4, heads 8 + 8
        let total = 40 + 16 + 48 + 8 + 8 + 144 + 4 + 16;
        let active = total - 48;
        assert_eq!(count_parameters(&cfg), ParamCount { total, active });
    }
}
