//! Differentiable forward pass recorded on a [`Tape`].

use super::forward::{check_tokens, geometry, positions, Mode};
use super::{Parameters, TransformerConfig, GATE_EPSILON};
use crate::kernels::Unary;
use crate::tape::{Tape, Var};
use crate::{Element, Error, Result};

const LAYER_FIELDS: usize = 11;

/// Tape leaves for every parameter tensor, in [`Parameters::named`] order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
    n_layers: usize,
}

impl ParamVars {
    pub fn record<T: Element>(params: &Parameters<T>, tape: &mut Tape<T>) -> Self {
        let vars = params.named().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        ParamVars {
            vars,
            n_layers: params.layers.len(),
        }
    }

    /// All leaves, aligned with [`Parameters::named`].
    pub fn all(&self) -> &[Var] {
        &self.vars
    }

    fn embedding(&self) -> Var {
        self.vars[0]
    }

    fn layer(&self, l: usize, field: usize) -> Var {
        self.vars[1 + l * LAYER_FIELDS + field]
    }

    fn final_norm(&self) -> Var {
        self.vars[1 + self.n_layers * LAYER_FIELDS]
    }

    fn head(&self) -> Var {
        self.vars[2 + self.n_layers * LAYER_FIELDS]
    }

    fn gate(&self, l: usize) -> (Var, Var) {
        let base = 3 + self.n_layers * LAYER_FIELDS + 2 * l;
        (self.vars[base], self.vars[base + 1])
    }
}

/// Handles produced by [`forward_tape`].
#[derive(Clone, Debug)]
pub struct TapeForward {
    pub params: ParamVars,
    /// `tokens x V` logits.
    pub logits: Var,
    /// First-half gates, one `[tokens]` vector per gate layer; layer `l >= L/2`
    /// uses `gates[L - l - 1]`. Empty in dense mode.
    pub gates: Vec<Var>,
    pub soft_mask: Vec<Var>,
    pub accumulated: Vec<Var>,
}

// Field offsets inside one layer, matching `LayerParams::fields`.
const WQ: usize = 0;
const WK: usize = 1;
const WV: usize = 2;
const WO: usize = 3;
const W_GATE: usize = 4;
const W_UP: usize = 5;
const W_DOWN: usize = 6;
const ATTN_PRE: usize = 7;
const ATTN_POST: usize = 8;
const FFN_PRE: usize = 9;
const FFN_POST: usize = 10;

/// Records the forward pass of `batch` sequences laid end to end in `ids`.
/// Only `Dense` and `GatedMultiply` are differentiable modes.
pub fn forward_tape<T: Element>(
    tape: &mut Tape<T>,
    params: &Parameters<T>,
    config: &TransformerConfig,
    ids: &[usize],
    batch: usize,
    mode: Mode,
) -> Result<TapeForward> {
    check_tokens(config, ids, batch)?;
    let gated = match mode {
        Mode::Dense => false,
        Mode::GatedMultiply if params.is_gated() => true,
        Mode::GatedMultiply => return Err(Error::Config("gated mode on a model without gate probes".into())),
        Mode::GatedSkip => return Err(Error::Config("skip mode is inference-only".into())),
    };
    let pv = ParamVars::record(params, tape);
    let geom = geometry(config, batch, ids.len())?;
    let pos = positions(geom);
    let (eps, theta, dh) = (config.norm_eps, config.rope_theta, config.head_dim());
    let n_layers = config.n_layers;
    let half = config.gate_layers();
    let tokens = ids.len();

    let mut h = tape.gather_rows(pv.embedding(), ids)?;
    let mut soft = Vec::new();
    let mut acc: Vec<Var> = Vec::new();
    let mut gates: Vec<Var> = Vec::new();
    let mut biases: Vec<Var> = Vec::new();
    for l in 0..n_layers {
        let gate = if gated {
            if l < half {
                let (w, b) = pv.gate(l);
                let pre = tape.matmul(h, w)?;
                let pre = tape.add_row_bias(pre, b)?;
                let s = tape.unary(pre, Unary::Relu)?;
                let s = tape.reshape(s, &[tokens])?;
                let total = match acc.last() {
                    Some(&prev) => tape.add(prev, s)?,
                    None => s,
                };
                let c = tape.unary(total, Unary::Clamp01)?;
                let neg = tape.unary(c, Unary::Scale(-1.0))?;
                let g = tape.unary(neg, Unary::Shift(1.0))?;
                let floored = tape.unary(g, Unary::Floor(GATE_EPSILON))?;
                biases.push(tape.unary(floored, Unary::Ln)?);
                soft.push(s);
                acc.push(total);
                gates.push(g);
            }
            let m = super::gates::mirrored_layer(l, n_layers);
            Some((gates[m], biases[m]))
        } else {
            None
        };
        let p = |f| pv.layer(l, f);

        let x = tape.rmsnorm(h, p(ATTN_PRE), eps)?;
        let q = tape.matmul(x, p(WQ))?;
        let q = tape.rope(q, dh, &pos, theta)?;
        let k = tape.matmul(x, p(WK))?;
        let k = tape.rope(k, dh, &pos, theta)?;
        let v = tape.matmul(x, p(WV))?;
        let o = tape.attention(q, k, v, gate.map(|(_, b)| b), geom)?;
        let o = tape.matmul(o, p(WO))?;
        let mut o = tape.rmsnorm(o, p(ATTN_POST), eps)?;
        if let Some((g, _)) = gate {
            o = tape.scale_rows(o, g)?;
        }
        let a = tape.add(h, o)?;

        let x = tape.rmsnorm(a, p(FFN_PRE), eps)?;
        let u = tape.matmul(x, p(W_GATE))?;
        let u = tape.unary(u, Unary::Silu)?;
        let w = tape.matmul(x, p(W_UP))?;
        let m = tape.mul(u, w)?;
        let f = tape.matmul(m, p(W_DOWN))?;
        let mut f = tape.rmsnorm(f, p(FFN_POST), eps)?;
        if let Some((g, _)) = gate {
            f = tape.scale_rows(f, g)?;
        }
        h = tape.add(a, f)?;
    }
    let h = tape.rmsnorm(h, pv.final_norm(), eps)?;
    let logits = tape.matmul(h, pv.head())?;
    Ok(TapeForward {
        params: pv,
        logits,
        gates,
        soft_mask: soft,
        accumulated: acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use crate::rng::RngService;

    #[test]
    fn tape_logits_match_executor() {
        let cfg = TransformerConfig::toy(8, 4, 2, 1, 16);
        let mut params = Parameters::<f64>::init(&cfg, true, &RngService::new(5)).unwrap();
        for g in &mut params.gates {
            g.bias.data_mut()[0] = 0.4;
        }
        let model = Model::new(cfg.clone(), params.clone()).unwrap();
        let ids: Vec<usize> = (0..10).map(|i| (i * 5 + 1) % 16).collect();
        for mode in [Mode::Dense, Mode::GatedMultiply] {
            let mut tape = Tape::new();
            let out = forward_tape(&mut tape, &params, &cfg, &ids, 2, mode).unwrap();
            let pure = model.forward(&ids, 2, mode).unwrap();
            assert_eq!(tape.value(out.logits), &pure.logits);
            if mode == Mode::GatedMultiply {
                for (l, &g) in out.gates.iter().enumerate() {
                    assert_eq!(tape.value(g).to_f64_vec(), pure.trace.gates[l]);
                }
            }
        }
    }

    #[test]
    fn skip_mode_not_differentiable() {
        let cfg = TransformerConfig::toy(8, 2, 2, 2, 16);
        let params = Parameters::<f64>::zeros(&cfg, true);
        let r = forward_tape(&mut Tape::new(), &params, &cfg, &[1, 2], 1, Mode::GatedSkip);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
