use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Architecture hyperparameters. Defaults are the GPT-2-small-sized Llama-3
/// style model; toy runs override the vocabulary and dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub vocab_size: usize,
    pub ffn_dim_multiplier: f64,
    pub multiple_of: usize,
    pub norm_eps: f64,
    pub rope_theta: f64,
    pub use_scaled_rope: bool,
    pub max_seq_len: usize,
    pub initializer_range: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            dim: 768,
            n_layers: 12,
            n_heads: 12,
            n_kv_heads: 12,
            vocab_size: 50257,
            ffn_dim_multiplier: 4.0,
            multiple_of: 256,
            norm_eps: 1e-5,
            rope_theta: 10000.0,
            use_scaled_rope: false,
            max_seq_len: 1024,
            initializer_range: 0.02,
        }
    }
}

impl TransformerConfig {
    /// A small configuration for tests: `dim` wide, `n_layers` deep, with
    /// `n_heads` query heads sharing `n_kv_heads` key/value heads.
    pub fn toy(dim: usize, n_layers: usize, n_heads: usize, n_kv_heads: usize, vocab_size: usize) -> Self {
        TransformerConfig {
            dim,
            n_layers,
            n_heads,
            n_kv_heads,
            vocab_size,
            ffn_dim_multiplier: 1.0,
            multiple_of: 4,
            max_seq_len: 256,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 || !self.n_layers.is_multiple_of(2) {
            return fail(format!("n_layers must be even and positive, got {}", self.n_layers));
        }
        if self.n_heads == 0 || self.n_kv_heads == 0 || !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return fail(format!(
                "n_heads ({}) must be a positive multiple of n_kv_heads ({})",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.dim == 0 || !self.dim.is_multiple_of(self.n_heads) {
            return fail(format!("dim ({}) must be divisible by n_heads ({})", self.dim, self.n_heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return fail(format!("head dim {} must be even for rotary embeddings", self.head_dim()));
        }
        if self.vocab_size == 0 || self.vocab_size > u16::MAX as usize + 1 {
            return fail(format!("vocab_size {} outside 1..=65536", self.vocab_size));
        }
        if !(self.ffn_dim_multiplier > 0.0) || self.multiple_of == 0 {
            return fail("ffn_dim_multiplier and multiple_of must be positive".into());
        }
        if !(self.norm_eps > 0.0) || !(self.rope_theta > 0.0) || !(self.initializer_range >= 0.0) {
            return fail("norm_eps, rope_theta must be positive and initializer_range non-negative".into());
        }
        if self.use_scaled_rope {
            return fail("use_scaled_rope is not supported".into());
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    /// Number of first-half layers that own a gate probe.
    pub fn gate_layers(&self) -> usize {
        self.n_layers / 2
    }

    /// SwiGLU hidden width, following the Llama 3 reference rule:
    /// `4d -> floor(2/3 * .) -> floor(multiplier * .) -> round up to multiple_of`.
    pub fn ffn_hidden_dim(&self) -> usize {
        let hidden = 4 * self.dim;
        let hidden = 2 * hidden / 3;
        let hidden = (self.ffn_dim_multiplier * hidden as f64) as usize;
        self.multiple_of * hidden.div_ceil(self.multiple_of)
    }
}
