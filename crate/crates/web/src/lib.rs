//! Browser demo bindings. Every export takes and returns JSON text so the
//! page needs no generated type glue; the same functions run natively in
//! tests.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::wasm_bindgen;

use skipmid::controller::{ControllerConfig, ControllerState, SyntheticGates, Variant};
use skipmid::flops::{self, FlopsReport};
use skipmid::model::{log_gate, GateTrace, TransformerConfig};

fn parse<'a, T: Deserialize<'a>>(json: &'a str) -> Result<T, String> {
    serde_json::from_str(json).map_err(|e| format!("bad input: {e}"))
}

fn emit<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

#[derive(Deserialize)]
struct GateInput {
    n_layers: usize,
    /// `n_layers / 2` rows of per-token soft masks.
    soft_mask: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct GateOutput {
    accumulated: Vec<Vec<f64>>,
    gates: Vec<Vec<f64>>,
    /// Blocks each token runs.
    blocks: Vec<usize>,
    layer_sparsity: Vec<f64>,
    /// `attention[i][j]`: weight of key `j` for query `i` when all raw
    /// scores are equal, so only the gate bias shapes the distribution.
    attention: Vec<Vec<f64>>,
}

/// Accumulated masks, mirrored gates and the gate-only attention pattern
/// of a hand-entered soft-mask table.
#[wasm_bindgen]
pub fn gate_explorer(input: &str) -> Result<String, String> {
    let GateInput { n_layers, soft_mask } = parse(input)?;
    if n_layers == 0 {
        return Err("n_layers must be positive".into());
    }
    let tr = GateTrace::from_soft_mask(soft_mask, n_layers).map_err(|e| e.to_string())?;
    let n = tr.tokens();
    let blocks = (0..n).map(|t| (0..n_layers).filter(|&l| tr.gates[l][t] > 0.0).count()).collect();
    // The deepest gate layer decides which tokens the central blocks see.
    let last = tr.gates.get(n_layers / 2 - 1).cloned().unwrap_or_default();
    let attention = (0..n)
        .map(|i| {
            let w: Vec<f64> = last[..=i].iter().map(|&g| log_gate(g).exp()).collect();
            let z: f64 = w.iter().sum();
            w.iter().map(|x| x / z).collect()
        })
        .collect();
    emit(&GateOutput {
        layer_sparsity: tr.layer_sparsity(),
        accumulated: tr.accumulated,
        gates: tr.gates,
        blocks,
        attention,
    })
}

#[derive(Deserialize)]
#[serde(default)]
struct CurveInput {
    dim: usize,
    n_layers: usize,
    n_heads: usize,
    n_kv_heads: usize,
    vocab_size: usize,
    seq_len: usize,
    points: usize,
}

impl Default for CurveInput {
    fn default() -> Self {
        CurveInput {
            dim: 768,
            n_layers: 12,
            n_heads: 12,
            n_kv_heads: 12,
            vocab_size: 50257,
            seq_len: 1024,
            points: 21,
        }
    }
}

#[derive(Serialize)]
struct CurvePoint {
    z: f64,
    gated_flops: f64,
    ratio: f64,
    active_param_reduction: f64,
}

#[derive(Serialize)]
struct CurveOutput {
    block_params: u64,
    total_params: u64,
    gating_params: u64,
    dense_flops: f64,
    points: Vec<CurvePoint>,
}

/// Estimated forward FLOPs against a sparsity `z` shared by every layer.
#[wasm_bindgen]
pub fn flops_curve(input: &str) -> Result<String, String> {
    let c: CurveInput = parse(input)?;
    let cfg = TransformerConfig {
        dim: c.dim,
        n_layers: c.n_layers,
        n_heads: c.n_heads,
        n_kv_heads: c.n_kv_heads,
        vocab_size: c.vocab_size,
        max_seq_len: c.seq_len.max(1),
        ..TransformerConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let steps = c.points.max(2) - 1;
    let points = (0..=steps)
        .map(|k| {
            let z = k as f64 / steps as f64;
            let r = FlopsReport::new(&cfg, true, c.seq_len, &vec![z; cfg.n_layers], None)?;
            Ok(CurvePoint {
                z,
                gated_flops: r.gated_flops,
                ratio: r.gated_flops / r.dense_flops,
                active_param_reduction: r.active_param_reduction,
            })
        })
        .collect::<skipmid::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    emit(&CurveOutput {
        block_params: flops::block_params(&cfg),
        total_params: flops::total_params(&cfg, true),
        gating_params: flops::gating_params(&cfg),
        dense_flops: flops::dense_flops(&cfg, c.seq_len),
        points,
    })
}

#[derive(Deserialize)]
#[serde(default)]
struct SimInput {
    targets: Vec<f64>,
    steps: usize,
    variant: Variant,
    gamma: f64,
    delta: f64,
    lr: f64,
    pull: f64,
    initial_logit: f64,
    /// Record every this many steps.
    stride: usize,
}

impl Default for SimInput {
    fn default() -> Self {
        let c = ControllerConfig::default();
        SimInput {
            targets: vec![0.25, 0.5, 0.75],
            steps: 2000,
            variant: c.variant,
            gamma: c.gamma,
            delta: c.delta,
            lr: 0.02,
            pull: 0.01,
            initial_logit: 3.0,
            stride: 10,
        }
    }
}

#[derive(Serialize)]
struct SimOutput {
    steps: Vec<usize>,
    /// `gates[k][t]`: gate of layer `k` at recorded step `t`.
    gates: Vec<Vec<f64>>,
    alpha: Vec<Vec<f64>>,
    final_gates: Vec<f64>,
}

/// Closed-loop run of the coefficient controller against a standalone
/// sigmoid gate per layer.
#[wasm_bindgen]
pub fn controller_simulation(input: &str) -> Result<String, String> {
    let s: SimInput = parse(input)?;
    if s.targets.is_empty() || s.steps > 100_000 {
        return Err("need at least one target and at most 100000 steps".into());
    }
    let cfg = ControllerConfig {
        variant: s.variant,
        gamma: s.gamma,
        delta: s.delta,
        ..ControllerConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    if s.targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err("targets must lie in [0, 1]".into());
    }
    let k = s.targets.len();
    let mut state = ControllerState {
        alpha: vec![cfg.alpha_init; k],
        beta: vec![cfg.beta_init; k],
        mu_target: s.targets.clone(),
        var_target: s.targets.iter().map(|m| m * (1.0 - m)).collect(),
    };
    let mut plant = SyntheticGates::new(k, s.initial_logit, s.pull, s.lr);
    let stride = s.stride.max(1);
    let mut out = SimOutput {
        steps: Vec::new(),
        gates: vec![Vec::new(); k],
        alpha: vec![Vec::new(); k],
        final_gates: Vec::new(),
    };
    for step in 0..=s.steps {
        if step % stride == 0 || step == s.steps {
            out.steps.push(step);
            for (l, g) in plant.gates().into_iter().enumerate() {
                out.gates[l].push(g);
                out.alpha[l].push(state.alpha[l]);
            }
        }
        if step < s.steps {
            plant.step(&mut state, &cfg).map_err(|e| e.to_string())?;
        }
    }
    out.final_gates = plant.gates();
    emit(&out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn explorer_closes_gates_at_one() {
        let out: Value = serde_json::from_str(
            &gate_explorer(r#"{"n_layers": 4, "soft_mask": [[0.2, 0.6, 0.0], [0.9, 0.5, 0.1]]}"#).unwrap(),
        )
        .unwrap();
        assert_eq!(out["blocks"], serde_json::json!([2, 2, 4]));
        let g = &out["gates"];
        assert_eq!(g[1], g[2]);
        assert_eq!(g[1], serde_json::json!([0.0, 0.0, 0.9]));
        let row = out["attention"][2].as_array().unwrap();
        assert!(row[0].as_f64().unwrap() < 1e-5);
        assert!(gate_explorer(r#"{"n_layers": 3, "soft_mask": []}"#).is_err());
        assert!(gate_explorer("nope").is_err());
        assert!(gate_explorer(r#"{"n_layers": 0, "soft_mask": []}"#).is_err());
    }

    #[test]
    fn curve_runs_from_dense_to_head_only() {
        let out: Value = serde_json::from_str(&flops_curve(r#"{"points": 11}"#).unwrap()).unwrap();
        let pts = out["points"].as_array().unwrap();
        assert_eq!(pts.len(), 11);
        assert_eq!(pts[0]["ratio"].as_f64(), Some(1.0));
        let ratios: Vec<f64> = pts.iter().map(|p| p["ratio"].as_f64().unwrap()).collect();
        assert!(ratios.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(out["gating_params"].as_u64(), Some(4614));
    }

    #[test]
    fn simulation_settles_on_targets() {
        let out: Value = serde_json::from_str(&controller_simulation("{}").unwrap()).unwrap();
        let fin: Vec<f64> = out["final_gates"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        for (g, t) in fin.iter().zip([0.25, 0.5, 0.75]) {
            assert!((g - t).abs() <= 0.02, "{fin:?}");
        }
        assert_eq!(out["steps"].as_array().unwrap().len(), 201);
        assert!(controller_simulation(r#"{"targets": [1.5]}"#).is_err());
    }
}
