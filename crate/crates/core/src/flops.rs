//! Parameter counts and forward-FLOPs estimates.
//!
//! The estimate charges [`cost::MAC`] FLOPs per multiply-accumulate and fixed
//! per-element constants for norms, activations, rotary embeddings and
//! softmax. The same constants drive the tape's instrumented counter, so the
//! dense estimate reproduces a recorded forward pass exactly.
//!
//! Gated estimates assume skipped tokens cost nothing in the layers they skip
//! and that keys of skipped tokens are dropped from attention. Gate probes and
//! gate multiplications are not charged, which makes the zero-sparsity
//! estimate identical to the dense one.

use crate::model::{GateTrace, TransformerConfig};
use crate::{Error, Result};

/// FLOPs charged per operation.
pub mod cost {
    /// One multiply-accumulate.
    pub const MAC: u64 = 2;
    /// RMSNorm: square, sum, mean, add eps, rsqrt (2), scale, weight.
    pub const NORM_PER_ELEMENT: u64 = 7;
    /// SiLU: negate, exp, add, divide.
    pub const SILU: u64 = 4;
    /// Rotary embedding: two products and one sum per output element.
    pub const ROPE_PER_ELEMENT: u64 = 3;
    /// Softmax: max, subtract, exp, sum, divide.
    pub const SOFTMAX_PER_ELEMENT: u64 = 5;

    /// One (query, key) pair of one head: score dot product, value
    /// accumulation, scale, additive bias and softmax.
    pub const fn attention_pair(head_dim: usize) -> u64 {
        2 * MAC * head_dim as u64 + 2 + SOFTMAX_PER_ELEMENT
    }
}

/// Parameters of one block: attention and FFN projections plus four norm
/// weight vectors.
pub fn block_params(config: &TransformerConfig) -> u64 {
    let (d, kv, h) = (config.dim as u64, config.kv_dim() as u64, config.ffn_hidden_dim() as u64);
    2 * d * d + 2 * d * kv + 3 * d * h + 4 * d
}

/// Gate probe parameters: `d + 1` for each first-half layer.
pub fn gating_params(config: &TransformerConfig) -> u64 {
    (config.dim as u64 + 1) * config.gate_layers() as u64
}

/// Embedding, all blocks, final norm and head, plus probes when `gated`.
pub fn total_params(config: &TransformerConfig, gated: bool) -> u64 {
    let (d, v) = (config.dim as u64, config.vocab_size as u64);
    let gates = if gated { gating_params(config) } else { 0 };
    v * d + config.n_layers as u64 * block_params(config) + d + d * v + gates
}

fn check_unit(z: &[f64]) -> Result<()> {
    match z.iter().find(|&&x| !(0.0..=1.0).contains(&x)) {
        Some(x) => Err(Error::Contract(format!("sparsity {x} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Per-token reduction in active parameters, `2 N_B sum(z)` over the
/// first-half sparsities.
pub fn active_param_reduction(block_params: u64, first_half_sparsity: &[f64]) -> Result<f64> {
    check_unit(first_half_sparsity)?;
    Ok(2.0 * block_params as f64 * first_half_sparsity.iter().sum::<f64>())
}

/// Work done by one layer for one sequence: tokens that run the block and
/// the (query, key) pairs they attend over.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerLoad {
    pub active_tokens: f64,
    pub visible_pairs: f64,
}

impl LayerLoad {
    pub fn dense(seq_len: usize) -> Self {
        let n = seq_len as f64;
        LayerLoad {
            active_tokens: n,
            visible_pairs: n * (n + 1.0) / 2.0,
        }
    }

    /// Expected load when a fraction `z` of tokens is skipped independently
    /// of position: `N(1-z)` queries, each seeing its own key plus a `(1-z)`
    /// share of the `(N-1)/2` earlier keys on average.
    pub fn from_sparsity(z: f64, seq_len: usize) -> Result<Self> {
        check_unit(&[z])?;
        let n = seq_len as f64;
        let active = n * (1.0 - z);
        let mean_keys = 1.0 + (1.0 - z) * (n - 1.0) / 2.0;
        Ok(LayerLoad {
            active_tokens: active,
            visible_pairs: active * mean_keys,
        })
    }

    /// Exact per-sequence loads averaged over the `batch` sequences of a
    /// trace, counting for each active query the active keys at or before it.
    pub fn from_trace(trace: &GateTrace, batch: usize) -> Result<Vec<Self>> {
        let tokens = trace.tokens();
        if batch == 0 || tokens == 0 || !tokens.is_multiple_of(batch) {
            return Err(Error::Contract(format!("{tokens} traced tokens do not form {batch} sequences")));
        }
        let n = tokens / batch;
        Ok(trace
            .gates
            .iter()
            .map(|g| {
                let (mut active, mut pairs) = (0u64, 0u64);
                for seq in g.chunks(n) {
                    let mut seen = 0u64;
                    for &x in seq {
                        if x > 0.0 {
                            seen += 1;
                            active += 1;
                            pairs += seen;
                        }
                    }
                }
                LayerLoad {
                    active_tokens: active as f64 / batch as f64,
                    visible_pairs: pairs as f64 / batch as f64,
                }
            })
            .collect())
    }
}

/// Block FLOPs per active token outside the attention pairs.
pub fn block_token_flops(config: &TransformerConfig) -> u64 {
    use cost::*;
    let (d, kv, h) = (config.dim as u64, config.kv_dim() as u64, config.ffn_hidden_dim() as u64);
    let norms = 4 * NORM_PER_ELEMENT * d;
    let matmuls = MAC * (2 * d * d + 2 * d * kv + 3 * d * h);
    let rope = ROPE_PER_ELEMENT * (d + kv);
    let ffn_act = (SILU + 1) * h;
    let residual = 2 * d;
    norms + matmuls + rope + ffn_act + residual
}

/// Final norm and head, per token.
pub fn head_token_flops(config: &TransformerConfig) -> u64 {
    let (d, v) = (config.dim as u64, config.vocab_size as u64);
    cost::NORM_PER_ELEMENT * d + cost::MAC * d * v
}

/// Forward FLOPs of one sequence of `seq_len` tokens with one load per layer.
pub fn forward_flops(config: &TransformerConfig, seq_len: usize, loads: &[LayerLoad]) -> Result<f64> {
    if loads.len() != config.n_layers {
        return Err(Error::Contract(format!(
            "{} layer loads for {} layers",
            loads.len(),
            config.n_layers
        )));
    }
    let block = block_token_flops(config) as f64;
    let pair = (config.n_heads as u64 * cost::attention_pair(config.head_dim())) as f64;
    let layers: f64 = loads
        .iter()
        .map(|l| l.active_tokens * block + l.visible_pairs * pair)
        .sum();
    Ok(layers + seq_len as f64 * head_token_flops(config) as f64)
}

pub fn dense_flops(config: &TransformerConfig, seq_len: usize) -> f64 {
    let loads = vec![LayerLoad::dense(seq_len); config.n_layers];
    forward_flops(config, seq_len, &loads).expect("one load per layer")
}

/// Gated FLOPs from per-layer sparsities alone (`L` entries).
pub fn gated_flops(config: &TransformerConfig, seq_len: usize, layer_sparsity: &[f64]) -> Result<f64> {
    let loads = layer_sparsity
        .iter()
        .map(|&z| LayerLoad::from_sparsity(z, seq_len))
        .collect::<Result<Vec<_>>>()?;
    forward_flops(config, seq_len, &loads)
}

/// Per-layer and overall fractions of exactly-zero gates.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityReport {
    pub layer_sparsity: Vec<f64>,
    pub overall: f64,
}

impl SparsityReport {
    /// The first-half entries, one per gate layer.
    pub fn first_half(&self) -> &[f64] {
        &self.layer_sparsity[..self.layer_sparsity.len() / 2]
    }
}

pub fn gate_sparsity_report(traces: &[GateTrace]) -> Result<SparsityReport> {
    let all = GateTrace::concat(traces)?;
    if all.tokens() == 0 {
        return Err(Error::Contract("no traced tokens".into()));
    }
    let layer_sparsity = all.layer_sparsity();
    let overall = layer_sparsity.iter().sum::<f64>() / layer_sparsity.len().max(1) as f64;
    Ok(SparsityReport {
        layer_sparsity,
        overall,
    })
}

/// Parameter and FLOPs summary of one configuration at given sparsities.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopsReport {
    pub block_params: u64,
    pub total_params: u64,
    pub gating_params: u64,
    pub seq_len: usize,
    pub dense_flops: f64,
    pub gated_flops: f64,
    pub active_param_reduction: f64,
    pub layer_sparsity: Vec<f64>,
}

impl FlopsReport {
    /// Report at per-layer sparsities `layer_sparsity` (`L` entries). When
    /// `loads` is given (measured from traces) it replaces the estimate
    /// derived from the sparsities.
    pub fn new(
        config: &TransformerConfig,
        gated: bool,
        seq_len: usize,
        layer_sparsity: &[f64],
        loads: Option<&[LayerLoad]>,
    ) -> Result<Self> {
        if layer_sparsity.len() != config.n_layers {
            return Err(Error::Contract(format!(
                "{} layer sparsities for {} layers",
                layer_sparsity.len(),
                config.n_layers
            )));
        }
        let n_b = block_params(config);
        let gated_flops = match loads {
            Some(l) => forward_flops(config, seq_len, l)?,
            None => gated_flops(config, seq_len, layer_sparsity)?,
        };
        Ok(FlopsReport {
            block_params: n_b,
            total_params: total_params(config, gated),
            gating_params: if gated { gating_params(config) } else { 0 },
            seq_len,
            dense_flops: dense_flops(config, seq_len),
            gated_flops,
            active_param_reduction: active_param_reduction(n_b, &layer_sparsity[..config.gate_layers()])?,
            layer_sparsity: layer_sparsity.to_vec(),
        })
    }

    /// Fraction of dense FLOPs saved.
    pub fn flops_reduction(&self) -> f64 {
        1.0 - self.gated_flops / self.dense_flops
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "N_B = {}\ntotal_params = {}\ngating_params = {}\nseq_len = {}\ndense_flops = {}\ngated_flops = {}\nreduction = {:.6}\nactive_param_reduction = {}\n",
            self.block_params,
            self.total_params,
            self.gating_params,
            self.seq_len,
            self.dense_flops,
            self.gated_flops,
            self.flops_reduction(),
            self.active_param_reduction,
        );
        for (l, z) in self.layer_sparsity.iter().enumerate() {
            s.push_str(&format!("z_{l} = {z:.6}\n"));
        }
        s
    }

    pub fn csv_header(&self) -> String {
        let mut cols: Vec<String> = [
            "N_B",
            "total_params",
            "gating_params",
            "seq_len",
            "dense_flops",
            "gated_flops",
            "reduction",
            "active_param_reduction",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        cols.extend((0..self.layer_sparsity.len()).map(|l| format!("z_{l}")));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.block_params.to_string(),
            self.total_params.to_string(),
            self.gating_params.to_string(),
            self.seq_len.to_string(),
            self.dense_flops.to_string(),
            self.gated_flops.to_string(),
            self.flops_reduction().to_string(),
            self.active_param_reduction.to_string(),
        ];
        cols.extend(self.layer_sparsity.iter().map(|z| z.to_string()));
        cols.join(",")
    }
}
