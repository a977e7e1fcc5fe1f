//! Tape-free forward passes used for inference and evaluation.
//!
//! All three modes share one block implementation. `GatedSkip` runs the query
//! side of attention, the output projection and the FFN only for tokens whose
//! gate is nonzero; their residual vectors pass through untouched. Keys and
//! values are still projected for every token because the log-gate floor
//! leaves skipped positions an `eps`-sized share of attention, which keeps the
//! skip path exactly equivalent to the multiplicative one.

use std::str::FromStr;

use super::gates::{gate_from_accumulated, soft_mask, GateTrace, GATE_EPSILON};
use super::{LayerParams, Parameters, TransformerConfig};
use crate::kernels::{self, AttnGeom, Unary};
use crate::{Element, Error, Result, Tensor};

/// How gates enter the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Gates forced to one; the plain sandwich-norm Transformer.
    Dense,
    /// Module outputs multiplied by the gate; used for training.
    GatedMultiply,
    /// Tokens with a zero gate bypass the block entirely.
    GatedSkip,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Mode::Dense),
            "multiply" | "gated-multiply" => Ok(Mode::GatedMultiply),
            "skip" | "gated-skip" => Ok(Mode::GatedSkip),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Configuration plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: TransformerConfig,
    pub params: Parameters<T>,
}

/// Logits and gate trace of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    pub trace: GateTrace,
}

pub(crate) fn geometry(config: &TransformerConfig, batch: usize, rows: usize) -> Result<AttnGeom> {
    if batch == 0 || !rows.is_multiple_of(batch) {
        return Err(Error::Contract(format!("{rows} tokens do not split into {batch} sequences")));
    }
    Ok(AttnGeom {
        batch,
        seq: rows / batch,
        heads: config.n_heads,
        kv_heads: config.n_kv_heads,
        head_dim: config.head_dim(),
    })
}

pub(crate) fn positions(geom: AttnGeom) -> Vec<usize> {
    (0..geom.tokens()).map(|r| r % geom.seq).collect()
}

pub(crate) fn check_gates<T: Element>(gates: &[T]) -> Result<()> {
    match gates.iter().find(|&&g| !(g >= T::zero() && g <= T::one())) {
        Some(g) => Err(Error::Contract(format!("gate value {g} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Additive attention logit `ln(max(g, eps))` of each key.
pub fn log_gate<T: Element>(g: T) -> T {
    Unary::Ln.apply(Unary::Floor(GATE_EPSILON).apply(g))
}

fn select_rows<T: Element>(x: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    kernels::gather_rows(x, rows).expect("row indices come from the tensor itself")
}

pub fn rmsnorm<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    Ok(kernels::rmsnorm(x, weight, eps)?.0)
}

/// `W_down (silu(x W_gate) * (x W_up))`.
pub fn swiglu_ffn<T: Element>(x: &Tensor<T>, layer: &LayerParams<T>) -> Result<Tensor<T>> {
    let gate = kernels::map_unary(&kernels::matmul(x, &layer.w_gate)?, Unary::Silu)?;
    let up = kernels::matmul(x, &layer.w_up)?;
    let data = gate.data().iter().zip(up.data()).map(|(&a, &b)| a * b).collect();
    kernels::matmul(&Tensor::new(gate.shape(), data)?, &layer.w_down)
}

/// Gated causal attention module on (already normalized) input `x`, holding
/// `batch` sequences of equal length. Key `j` receives the additive logit
/// `ln(max(g_j, eps))`; without gates this is standard causal attention.
/// The result includes the output projection.
pub fn gated_attention<T: Element>(
    x: &Tensor<T>,
    gates: Option<&[T]>,
    layer: &LayerParams<T>,
    config: &TransformerConfig,
    batch: usize,
) -> Result<Tensor<T>> {
    let geom = geometry(config, batch, x.rows())?;
    if let Some(g) = gates {
        check_gates(g)?;
    }
    let all: Vec<usize> = (0..x.rows()).collect();
    attention_rows(x, gates, layer, config, geom, &all)
}

/// Attention outputs (after `Wo`) for the query rows `rows`, in that order.
fn attention_rows<T: Element>(
    x: &Tensor<T>,
    gates: Option<&[T]>,
    layer: &LayerParams<T>,
    config: &TransformerConfig,
    geom: AttnGeom,
    rows: &[usize],
) -> Result<Tensor<T>> {
    let pos = positions(geom);
    let theta = config.rope_theta;
    let dh = geom.head_dim;
    let mut k = kernels::matmul(x, &layer.wk)?;
    kernels::rope_in_place(k.data_mut(), dh, &pos, theta, 1.0)?;
    let v = kernels::matmul(x, &layer.wv)?;
    let every_row = rows.len() == x.rows();
    let q = if every_row {
        let mut q = kernels::matmul(x, &layer.wq)?;
        kernels::rope_in_place(q.data_mut(), dh, &pos, theta, 1.0)?;
        q
    } else {
        let mut q_sub = kernels::matmul(&select_rows(x, rows), &layer.wq)?;
        let sub_pos: Vec<usize> = rows.iter().map(|&r| pos[r]).collect();
        kernels::rope_in_place(q_sub.data_mut(), dh, &sub_pos, theta, 1.0)?;
        let qw = geom.q_width();
        let mut q = Tensor::zeros(&[x.rows(), qw]);
        for (i, &r) in rows.iter().enumerate() {
            q.data_mut()[r * qw..(r + 1) * qw].copy_from_slice(q_sub.row(i));
        }
        q
    };
    let bias: Option<Vec<T>> = gates.map(|g| g.iter().map(|&x| log_gate(x)).collect());
    let active: Option<Vec<bool>> = (!every_row).then(|| {
        let mut a = vec![false; x.rows()];
        rows.iter().for_each(|&r| a[r] = true);
        a
    });
    let (out, _) = kernels::attention(
        q.data(),
        k.data(),
        v.data(),
        bias.as_deref(),
        active.as_deref(),
        geom,
    )?;
    let out = Tensor::new(&[x.rows(), geom.q_width()], out)?;
    let out = if every_row { out } else { select_rows(&out, rows) };
    kernels::matmul(&out, &layer.wo)
}

/// One sandwich-normalized block:
/// `a = h + g * norm(attn(norm(h), g))`, `h' = a + g * norm(ffn(norm(a)))`.
///
/// `gates` must be given for the gated modes and is ignored in dense mode.
pub fn block_forward<T: Element>(
    h: &Tensor<T>,
    gates: Option<&[T]>,
    layer: &LayerParams<T>,
    config: &TransformerConfig,
    batch: usize,
    mode: Mode,
) -> Result<Tensor<T>> {
    let geom = geometry(config, batch, h.rows())?;
    let gates = match mode {
        Mode::Dense => None,
        _ => {
            let g = gates.ok_or_else(|| Error::Config("gated mode needs gate values".into()))?;
            if g.len() != h.rows() {
                return Err(Error::shape("block gates", h.shape(), &[g.len()]));
            }
            check_gates(g)?;
            Some(g)
        }
    };
    let rows: Vec<usize> = match (mode, gates) {
        (Mode::GatedSkip, Some(g)) => (0..h.rows()).filter(|&r| g[r] > T::zero()).collect(),
        _ => (0..h.rows()).collect(),
    };
    let eps = config.norm_eps;
    let every_row = rows.len() == h.rows();
    let d = h.last_dim();

    let x = rmsnorm(h, &layer.attn_norm_pre, eps)?;
    let attn = attention_rows(&x, gates, layer, config, geom, &rows)?;
    let attn = rmsnorm(&attn, &layer.attn_norm_post, eps)?;
    let mut a = h.clone();
    add_scaled_rows(&mut a, &attn, &rows, gates, d);

    let a_rows = if every_row { a.clone() } else { select_rows(&a, &rows) };
    let f = swiglu_ffn(&rmsnorm(&a_rows, &layer.ffn_norm_pre, eps)?, layer)?;
    let f = rmsnorm(&f, &layer.ffn_norm_post, eps)?;
    add_scaled_rows(&mut a, &f, &rows, gates, d);
    Ok(a)
}

/// `dst[rows[i]] += g[rows[i]] * src[i]` (no scaling without gates).
fn add_scaled_rows<T: Element>(dst: &mut Tensor<T>, src: &Tensor<T>, rows: &[usize], gates: Option<&[T]>, d: usize) {
    let data = dst.data_mut();
    for (i, &r) in rows.iter().enumerate() {
        let out = &mut data[r * d..(r + 1) * d];
        let upd = src.row(i);
        match gates {
            Some(g) => {
                let c = g[r];
                for (o, &u) in out.iter_mut().zip(upd) {
                    *o = *o + u * c;
                }
            }
            None => {
                for (o, &u) in out.iter_mut().zip(upd) {
                    *o = *o + u;
                }
            }
        }
    }
}

pub(crate) fn check_tokens(config: &TransformerConfig, ids: &[usize], batch: usize) -> Result<()> {
    if batch == 0 || ids.is_empty() || !ids.len().is_multiple_of(batch) {
        return Err(Error::Contract(format!(
            "{} tokens do not form {batch} non-empty sequences",
            ids.len()
        )));
    }
    let seq = ids.len() / batch;
    if seq > config.max_seq_len {
        return Err(Error::Contract(format!(
            "sequence length {seq} exceeds max_seq_len {}",
            config.max_seq_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Index {
            index: bad,
            bound: config.vocab_size,
        });
    }
    Ok(())
}

impl<T: Element> Model<T> {
    pub fn new(config: TransformerConfig, params: Parameters<T>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Model { config, params })
    }

    pub fn is_gated(&self) -> bool {
        self.params.is_gated()
    }

    /// Forward pass over `batch` equal-length sequences laid end to end in
    /// `ids`. Returns `N x V` logits and the gate trace (all ones in dense
    /// mode).
    pub fn forward(&self, ids: &[usize], batch: usize, mode: Mode) -> Result<ForwardOutput<T>> {
        let cfg = &self.config;
        check_tokens(cfg, ids, batch)?;
        if mode != Mode::Dense && !self.is_gated() {
            return Err(Error::Config("gated mode on a model without gate probes".into()));
        }
        let p = &self.params;
        let n_layers = cfg.n_layers;
        let half = cfg.gate_layers();
        let mut h = kernels::gather_rows(&p.token_embedding, ids)?;
        let mut soft: Vec<Vec<T>> = Vec::with_capacity(half);
        let mut acc: Vec<Vec<T>> = Vec::with_capacity(half);
        let mut half_gates: Vec<Vec<T>> = Vec::with_capacity(half);
        for (l, layer) in p.layers.iter().enumerate() {
            let gates = if mode == Mode::Dense {
                None
            } else {
                if l < half {
                    let gate = &p.gates[l];
                    let s = soft_mask(&h, &gate.weight, &gate.bias)?;
                    let total: Vec<T> = match acc.last() {
                        None => s.clone(),
                        Some(prev) => prev.iter().zip(&s).map(|(&a, &b)| a + b).collect(),
                    };
                    half_gates.push(total.iter().map(|&x| gate_from_accumulated(x)).collect());
                    soft.push(s);
                    acc.push(total);
                }
                Some(half_gates[super::gates::mirrored_layer(l, n_layers)].as_slice())
            };
            h = block_forward(&h, gates, layer, cfg, batch, mode)?;
        }
        let h = rmsnorm(&h, &p.final_norm, cfg.norm_eps)?;
        let logits = kernels::matmul(&h, &p.head)?;
        let trace = if mode == Mode::Dense {
            GateTrace::dense(ids.len(), n_layers)
        } else {
            let to64 = |v: Vec<Vec<T>>| -> Vec<Vec<f64>> {
                v.into_iter()
                    .map(|r| r.into_iter().map(|x| x.to_f64_lossy()).collect())
                    .collect()
            };
            GateTrace::from_first_half(to64(soft), to64(acc), to64(half_gates), n_layers)
        };
        Ok(ForwardOutput { logits, trace })
    }

    /// Mean next-token cross-entropy of `inputs` against `targets`.
    pub fn loss(&self, inputs: &[usize], targets: &[usize], batch: usize, mode: Mode) -> Result<(f64, GateTrace)> {
        let out = self.forward(inputs, batch, mode)?;
        let (ce, _) = kernels::cross_entropy(&out.logits, targets)?;
        Ok((ce.to_f64_lossy(), out.trace))
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngService;

    fn toy(gated: bool) -> Model<f64> {
        let cfg = TransformerConfig::toy(8, 4, 2, 1, 16);
        let params = Parameters::init(&cfg, gated, &RngService::new(11)).unwrap();
        Model::new(cfg, params).unwrap()
    }

    #[test]
    fn swiglu_zero_and_scalar() {
        let mut cfg = TransformerConfig::toy(8, 2, 2, 2, 16);
        cfg.multiple_of = 1;
        let layer = Parameters::<f64>::init(&cfg, false, &RngService::new(1)).unwrap().layers[0].clone();
        let y = swiglu_ffn(&Tensor::zeros(&[3, 8]), &layer).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let one = Tensor::<f64>::ones(&[1, 1]);
        let scalar = LayerParams {
            w_gate: one.clone(),
            w_up: one.clone(),
            w_down: one.clone(),
            ..layer
        };
        let y = swiglu_ffn(&one, &scalar).unwrap();
        assert!((y.data()[0] - 0.7310585786300049).abs() < 1e-12);
    }

    #[test]
    fn single_token_attention_is_projected_value() {
        let m = toy(false);
        let layer = &m.params.layers[0];
        let x = Tensor::from_f64(&[1, 8], &[0.3, -0.1, 0.5, 0.2, -0.7, 0.1, 0.0, 0.9]).unwrap();
        let out = gated_attention(&x, Some(&[1.0]), layer, &m.config, 1).unwrap();
        // v has kv_dim = 4 columns shared by both query heads.
        let v = kernels::matmul(&x, &layer.wv).unwrap();
        let mut both = v.data().to_vec();
        both.extend_from_slice(v.data());
        let expect = kernels::matmul(&Tensor::new(&[1, 8], both).unwrap(), &layer.wo).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn gates_outside_unit_interval_rejected() {
        let m = toy(false);
        let x = Tensor::zeros(&[2, 8]);
        let r = gated_attention(&x, Some(&[0.5, 1.5]), &m.params.layers[0], &m.config, 1);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn zero_gate_token_passes_through() {
        let m = toy(true);
        let h = Tensor::from_f64(&[3, 8], &(0..24).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap();
        for mode in [Mode::GatedMultiply, Mode::GatedSkip] {
            let out = block_forward(&h, Some(&[1.0, 0.0, 0.5]), &m.params.layers[1], &m.config, 1, mode).unwrap();
            assert_eq!(out.row(1), h.row(1));
            assert_ne!(out.row(0), h.row(0));
        }
        let dense = block_forward(&h, None, &m.params.layers[1], &m.config, 1, Mode::Dense).unwrap();
        let ones = block_forward(&h, Some(&[1.0; 3]), &m.params.layers[1], &m.config, 1, Mode::GatedMultiply).unwrap();
        assert_eq!(dense, ones);
    }

    #[test]
    fn forward_contract_errors() {
        let m = toy(true);
        assert!(matches!(m.forward(&[1, 2, 99], 1, Mode::Dense), Err(Error::Index { .. })));
        let long = vec![0; 257];
        assert!(matches!(m.forward(&long, 1, Mode::Dense), Err(Error::Contract(_))));
        let dense = toy(false);
        assert!(matches!(dense.forward(&[1, 2], 1, Mode::GatedSkip), Err(Error::Config(_))));
        assert!("sideways".parse::<Mode>().is_err());
    }

    #[test]
    fn trace_is_mirrored_and_monotone() {
        let mut m = toy(true);
        for g in &mut m.params.gates {
            g.bias.data_mut()[0] = 0.3;
        }
        let ids: Vec<usize> = (0..12).map(|i| (i * 7) % 16).collect();
        let out = m.forward(&ids, 2, Mode::GatedMultiply).unwrap();
        let tr = &out.trace;
        for i in 0..ids.len() {
            for l in 0..4 {
                assert_eq!(tr.gate(i, l), tr.gate(i, 3 - l));
            }
            assert!(tr.gate(i, 1) <= tr.gate(i, 0));
        }
    }
}
