//! Model and compression hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{KvdError, Result};

/// How the encoder is told which tokens were selected for retention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Selected tokens pass through adapted query/output projections,
    /// unselected tokens through the frozen ones.
    #[default]
    QueryOutput,
    /// No routing: a single learned embedding is added to the inputs of
    /// selected tokens instead. Ablation variant.
    SelectionEmbedding,
}

/// Architecture plus compression hyperparameters. `Default` is the desk
/// configuration: the smallest model that trains on the synthetic tasks in
/// minutes on one CPU core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub max_pos: usize,
    /// Fold length F: long contexts are encoded as independent F-token
    /// segments during training.
    pub fold_len: usize,
    /// Layer whose hidden states feed the importance scorer.
    pub scorer_layer: usize,
    /// Leading context tokens that are always retained, outside the
    /// retention budget.
    pub sink_count: usize,
    /// Mixture weight between forward and reverse KL in the distillation
    /// loss.
    pub lambda: f32,
    /// Rank of the low-rank adapter pairs.
    pub adapter_rank: usize,
    /// Numerator of the rank-stabilized adapter scaling alpha/sqrt(r).
    pub lora_alpha: f32,
    pub retention_min: f64,
    pub retention_max: f64,
    /// Apply scorer-driven attention decay when generating from a
    /// compressed cache, not just during training.
    pub decay_at_inference: bool,
    pub routing: RoutingMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 512,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            head_dim: 16,
            max_pos: 2048,
            fold_len: 128,
            scorer_layer: 2,
            sink_count: 4,
            lambda: 0.6,
            adapter_rank: 16,
            lora_alpha: 4.0,
            retention_min: 0.001,
            retention_max: 0.8,
            decay_at_inference: true,
            routing: RoutingMode::QueryOutput,
        }
    }
}

/// Reserved token ids in the synthetic vocabulary.
pub mod tokens {
    /// End of sequence; generation stops here.
    pub const EOS: u32 = 0;
    pub const PAD: u32 = 1;
    /// Separates a context from the question about it.
    pub const QUERY: u32 = 2;
    /// Prefix of copy-task prompts.
    pub const COPY: u32 = 3;
    /// Separates a copy-task payload from its echo.
    pub const SEP: u32 = 4;
    /// First id usable by task generators.
    pub const FIRST_FREE: u32 = 8;
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads * self.head_dim {
            return Err(KvdError::InvalidArg(format!(
                "d_model {} != n_heads {} * head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if self.scorer_layer >= self.n_layers {
            return Err(KvdError::InvalidArg(format!(
                "scorer_layer {} out of range for {} layers",
                self.scorer_layer, self.n_layers
            )));
        }
        if !(self.retention_min > 0.0 && self.retention_min <= self.retention_max)
            || self.retention_max > 1.0
        {
            return Err(KvdError::InvalidArg(format!(
                "retention bounds [{}, {}] must satisfy 0 < min <= max <= 1",
                self.retention_min, self.retention_max
            )));
        }
        if self.sink_count >= 10 {
            return Err(KvdError::InvalidArg(format!(
                "sink_count {} must stay below 10",
                self.sink_count
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(KvdError::InvalidArg(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if self.adapter_rank == 0 || self.fold_len <= self.sink_count {
            return Err(KvdError::InvalidArg(
                "adapter_rank must be positive and fold_len must exceed sink_count".into(),
            ));
        }
        Ok(())
    }

    /// Hash over the fields that determine cache and checkpoint
    /// compatibility. FNV-1a over a canonical rendering.
    pub fn arch_hash(&self) -> u64 {
        let canon = format!(
            "v{};d{};l{};h{};hd{};p{}",
            self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.head_dim, self.max_pos
        );
        let mut hash: u64 = 0xcbf29ce484222325;
        for b in canon.as_bytes() {
            hash ^= *b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        hash
    }

    /// Scaling factor applied to adapter deltas: alpha / sqrt(r).
    pub fn lora_scale(&self) -> f32 {
        self.lora_alpha / (self.adapter_rank as f32).sqrt()
    }
}
