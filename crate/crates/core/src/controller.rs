//! Gate statistics, sparsity regularizers and the coefficient controller.
//!
//! Statistics pool every token of a batch per layer. Coefficients live on
//! the `L/2` gate layers and are mirrored onto the second half, so the
//! regularizer sums `L` layer terms scaled by `1/L`.

use serde::{Deserialize, Serialize};

use crate::kernels::Unary;
use crate::model::gates::mirrored_layer;
use crate::model::GateTrace;
use crate::tape::{Tape, Var};
use crate::train::optim::{AdamW, AdamWConfig};
use crate::{Element, Error, Result, Tensor};

/// Regularizer family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `alpha * mean`, fixed coefficients.
    Sparsity,
    /// `alpha * mean + beta * var`, fixed coefficients.
    SparsityVariance,
    /// Mean/variance loss, coefficients stepped by `gamma * sign(deviation)`.
    Adaptive,
    /// Mean/variance loss, coefficients stepped by `gamma * deviation`.
    Proportional,
    /// Squared distance of mean and variance from their targets, with
    /// proportional coefficient updates.
    SparsityVarianceL2,
}

impl Variant {
    pub fn is_adaptive(self) -> bool {
        !matches!(self, Variant::Sparsity | Variant::SparsityVariance)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sparsity" => Variant::Sparsity,
            "sparsity_variance" => Variant::SparsityVariance,
            "adaptive" => Variant::Adaptive,
            "proportional" => Variant::Proportional,
            "sparsity_variance_l2" => Variant::SparsityVarianceL2,
            other => return Err(Error::Config(format!("unknown controller variant {other:?}"))),
        })
    }
}

/// When a coefficient moves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateCondition {
    /// `|deviation| > delta`.
    Absolute,
    /// `deviation > delta` only; coefficients never decrease.
    OneSided,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub variant: Variant,
    pub gamma: f64,
    pub delta: f64,
    /// Mean target of gate layer 0.
    pub mu_initial: f64,
    /// Mean target at the virtual layer `L/2`.
    pub mu_final: f64,
    pub update_condition: UpdateCondition,
    /// Starting mean coefficient; the only value used by the fixed variants.
    pub alpha_init: f64,
    /// Starting variance coefficient.
    pub beta_init: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            variant: Variant::Proportional,
            gamma: 1e-3,
            delta: 1e-2,
            mu_initial: 1.0,
            mu_final: 0.5,
            update_condition: UpdateCondition::Absolute,
            alpha_init: 0.0,
            beta_init: 0.0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !(self.delta >= 0.0) {
            return Err(Error::Config(format!(
                "gamma must be positive and delta non-negative, got {} and {}",
                self.gamma, self.delta
            )));
        }
        for (name, mu) in [("mu_initial", self.mu_initial), ("mu_final", self.mu_final)] {
            if !(0.0..=1.0).contains(&mu) {
                return Err(Error::Config(format!("{name} = {mu} outside [0, 1]")));
            }
        }
        if !self.alpha_init.is_finite() || !self.beta_init.is_finite() {
            return Err(Error::Config("initial coefficients must be finite".into()));
        }
        Ok(())
    }
}

/// Mean targets `mu_0 + l/(L/2) (mu_final - mu_0)` for gate layers
/// `l < L/2` and the matching Bernoulli variances `mu (1 - mu)`.
pub fn make_targets(n_layers: usize, mu_initial: f64, mu_final: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if n_layers == 0 || !n_layers.is_multiple_of(2) {
        return Err(Error::Config(format!("n_layers must be even and positive, got {n_layers}")));
    }
    for mu in [mu_initial, mu_final] {
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::Config(format!("target {mu} outside [0, 1]")));
        }
    }
    let half = n_layers / 2;
    let means: Vec<f64> = (0..half)
        .map(|l| mu_initial + l as f64 / half as f64 * (mu_final - mu_initial))
        .collect();
    let vars = means.iter().map(|m| m * (1.0 - m)).collect();
    Ok((means, vars))
}

/// Per-gate-layer coefficients and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerState {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub mu_target: Vec<f64>,
    pub var_target: Vec<f64>,
}

impl ControllerState {
    pub fn new(n_layers: usize, config: &ControllerConfig) -> Result<Self> {
        config.validate()?;
        let (mu_target, var_target) = make_targets(n_layers, config.mu_initial, config.mu_final)?;
        let half = mu_target.len();
        Ok(ControllerState {
            alpha: vec![config.alpha_init; half],
            beta: vec![config.beta_init; half],
            mu_target,
            var_target,
        })
    }

    pub fn gate_layers(&self) -> usize {
        self.alpha.len()
    }

    pub fn n_layers(&self) -> usize {
        2 * self.alpha.len()
    }
}

/// Per-layer batch mean and biased variance of the gates (`L` entries).
#[derive(Clone, Debug, PartialEq)]
pub struct GateStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

impl GateStats {
    /// Statistics of explicit per-layer gate values.
    pub fn from_gates(gates: &[Vec<f64>]) -> Result<Self> {
        if gates.is_empty() || gates.iter().any(Vec::is_empty) {
            return Err(Error::Contract("gate statistics need at least one token".into()));
        }
        let (mean, var) = gates.iter().map(|g| mean_var(g)).unzip();
        Ok(GateStats { mean, var })
    }

    pub fn n_layers(&self) -> usize {
        self.mean.len()
    }
}

pub fn batch_gate_stats(trace: &GateTrace) -> Result<GateStats> {
    GateStats::from_gates(&trace.gates)
}

fn check_layers(stats: &GateStats, state: &ControllerState) -> Result<()> {
    if stats.n_layers() != state.n_layers() {
        return Err(Error::Contract(format!(
            "{} layers of statistics for a {}-layer controller",
            stats.n_layers(),
            state.n_layers()
        )));
    }
    Ok(())
}

/// Regularization loss evaluated on batch statistics.
pub fn regularization_loss(stats: &GateStats, state: &ControllerState, variant: Variant) -> Result<f64> {
    check_layers(stats, state)?;
    let n = stats.n_layers();
    let mut total = 0.0;
    for l in 0..n {
        let k = mirrored_layer(l, n);
        let (a, b) = (state.alpha[k], state.beta[k]);
        let (m, v) = (stats.mean[l], stats.var[l]);
        total += match variant {
            Variant::Sparsity => a * m,
            Variant::SparsityVariance | Variant::Adaptive | Variant::Proportional => a * m + b * v,
            Variant::SparsityVarianceL2 => {
                let dm = m - state.mu_target[k];
                let dv = v - state.var_target[k];
                a * dm * dm + b * dv * dv
            }
        };
    }
    Ok(total / n as f64)
}

/// Records the regularizer on a tape. `gates` holds the `L/2` first-half
/// gate vectors; the second half reuses them through the mirror.
pub fn regularization_loss_tape<T: Element>(
    tape: &mut Tape<T>,
    gates: &[Var],
    state: &ControllerState,
    variant: Variant,
) -> Result<Var> {
    if gates.len() != state.gate_layers() {
        return Err(Error::Contract(format!(
            "{} gate vectors for {} gate layers",
            gates.len(),
            state.gate_layers()
        )));
    }
    let n = state.n_layers();
    let stats: Vec<(Var, Var)> = gates
        .iter()
        .map(|&g| Ok((tape.mean(g)?, tape.variance(g)?)))
        .collect::<Result<_>>()?;
    let mut total: Option<Var> = None;
    for l in 0..n {
        let k = mirrored_layer(l, n);
        let (m, v) = stats[k];
        let (a, b) = (state.alpha[k], state.beta[k]);
        let term = match variant {
            Variant::Sparsity => tape.unary(m, Unary::Scale(a))?,
            Variant::SparsityVariance | Variant::Adaptive | Variant::Proportional => {
                let am = tape.unary(m, Unary::Scale(a))?;
                let bv = tape.unary(v, Unary::Scale(b))?;
                tape.add(am, bv)?
            }
            Variant::SparsityVarianceL2 => {
                let dm = tape.unary(m, Unary::Shift(-state.mu_target[k]))?;
                let dm = tape.unary(dm, Unary::Square)?;
                let dm = tape.unary(dm, Unary::Scale(a))?;
                let dv = tape.unary(v, Unary::Shift(-state.var_target[k]))?;
                let dv = tape.unary(dv, Unary::Square)?;
                let dv = tape.unary(dv, Unary::Scale(b))?;
                tape.add(dm, dv)?
            }
        };
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("controller has no layers".into()))?;
    tape.unary(total, Unary::Scale(1.0 / n as f64))
}

fn step_size(deviation: f64, config: &ControllerConfig) -> f64 {
    let fires = match config.update_condition {
        UpdateCondition::Absolute => deviation.abs() > config.delta,
        UpdateCondition::OneSided => deviation > config.delta,
    };
    if !fires {
        return 0.0;
    }
    match config.variant {
        Variant::Adaptive => config.gamma * deviation.signum(),
        _ => config.gamma * deviation,
    }
}

/// One out-of-band coefficient update from the statistics of the current
/// step. Fixed-coefficient variants leave the state unchanged.
pub fn update_coefficients(state: &mut ControllerState, stats: &GateStats, config: &ControllerConfig) -> Result<()> {
    check_layers(stats, state)?;
    if !config.variant.is_adaptive() {
        return Ok(());
    }
    for k in 0..state.gate_layers() {
        state.alpha[k] += step_size(stats.mean[k] - state.mu_target[k], config);
        state.beta[k] += step_size(stats.var[k] - state.var_target[k], config);
    }
    Ok(())
}

/// Standalone plant for exercising the controller without a Transformer:
/// each gate layer emits a single gate `sigmoid(theta)`. A task term
/// `-pull * ln(gate)` stands in for the language-modeling loss, which
/// rewards open gates; the regularizer pushes back. The logits train with
/// AdamW.
#[derive(Clone, Debug)]
pub struct SyntheticGates {
    pub logits: Vec<f64>,
    pub pull: f64,
    optimizer: AdamW<f64>,
    lr: f64,
}

impl SyntheticGates {
    pub fn new(gate_layers: usize, initial_logit: f64, pull: f64, lr: f64) -> Self {
        let shapes = vec![vec![1]; gate_layers];
        SyntheticGates {
            logits: vec![initial_logit; gate_layers],
            pull,
            optimizer: AdamW::new(AdamWConfig::default(), &shapes),
            lr,
        }
    }

    pub fn gates(&self) -> Vec<f64> {
        self.logits.iter().map(|&t| crate::kernels::sigmoid(t)).collect()
    }

    /// Statistics over all `L` layers (mirrored).
    pub fn stats(&self) -> GateStats {
        let g = self.gates();
        let n = 2 * g.len();
        let mean: Vec<f64> = (0..n).map(|l| g[mirrored_layer(l, n)]).collect();
        GateStats {
            var: vec![0.0; n],
            mean,
        }
    }

    /// Optimizer step on the logits, then a controller update from the
    /// statistics seen by that step.
    pub fn step(&mut self, state: &mut ControllerState, config: &ControllerConfig) -> Result<GateStats> {
        let stats = self.stats();
        let g = self.gates();
        let n = state.n_layers() as f64;
        let grads: Vec<Tensor<f64>> = g
            .iter()
            .enumerate()
            .map(|(k, &gk)| {
                // Both mirrored layers contribute; the variance of one gate is 0.
                let dl_dmean = 2.0 / n
                    * match config.variant {
                        Variant::SparsityVarianceL2 => 2.0 * state.alpha[k] * (gk - state.mu_target[k]),
                        _ => state.alpha[k],
                    };
                let dsig = gk * (1.0 - gk);
                Tensor::scalar(dl_dmean * dsig - self.pull * (1.0 - gk))
            })
            .collect();
        let mut params: Vec<Tensor<f64>> = self.logits.iter().map(|&t| Tensor::scalar(t)).collect();
        let names: Vec<String> = (0..params.len()).map(|k| format!("logit.{k}")).collect();
        self.optimizer.step(params.iter_mut().collect(), &grads, &names, self.lr)?;
        for (t, p) in self.logits.iter_mut().zip(&params) {
            *t = p.data()[0];
        }
        update_coefficients(state, &stats, config)?;
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(alpha: &[f64], beta: &[f64], mu: &[f64], var: &[f64]) -> ControllerState {
        ControllerState {
            alpha: alpha.to_vec(),
            beta: beta.to_vec(),
            mu_target: mu.to_vec(),
            var_target: var.to_vec(),
        }
    }

    #[test]
    fn target_examples() {
        let (m, v) = make_targets(4, 1.0, 0.0).unwrap();
        assert_eq!(m, vec![1.0, 0.5]);
        assert_eq!(v, vec![0.0, 0.25]);
        let (m, v) = make_targets(6, 1.0, 1.0).unwrap();
        assert_eq!(m, vec![1.0; 3]);
        assert_eq!(v, vec![0.0; 3]);
        assert!(make_targets(4, 1.2, 0.0).is_err());
        assert!(make_targets(3, 1.0, 0.0).is_err());
    }

    #[test]
    fn stats_examples() {
        let s = GateStats::from_gates(&[vec![1.0, 0.0, 1.0, 0.0]]).unwrap();
        assert_eq!((s.mean[0], s.var[0]), (0.5, 0.25));
        let s = GateStats::from_gates(&[vec![0.3; 5]]).unwrap();
        assert!((s.mean[0] - 0.3).abs() < 1e-15 && s.var[0] < 1e-30);
        let s = GateStats::from_gates(&[vec![1.0, 0.5, 0.0]]).unwrap();
        assert!((s.var[0] - 1.0 / 6.0).abs() < 1e-15);
        assert!(GateStats::from_gates(&[vec![]]).is_err());
    }

    #[test]
    fn loss_examples() {
        let st = state(&[1.0], &[1.0], &[0.5], &[0.25]);
        let zero = state(&[0.0], &[0.0], &[0.5], &[0.25]);
        let stats = GateStats {
            mean: vec![0.5, 0.5],
            var: vec![0.1, 0.1],
        };
        assert_eq!(regularization_loss(&stats, &zero, Variant::Proportional).unwrap(), 0.0);
        assert_eq!(regularization_loss(&stats, &st, Variant::Sparsity).unwrap(), 0.5);
        let l2 = GateStats {
            mean: vec![0.6, 0.6],
            var: vec![0.2, 0.2],
        };
        let v = regularization_loss(&l2, &st, Variant::SparsityVarianceL2).unwrap();
        assert!((v - 0.0125).abs() < 1e-12);
    }

    #[test]
    fn tape_loss_matches_direct_loss() {
        let st = state(&[0.3, -0.7], &[1.1, 0.4], &[1.0, 0.75], &[0.0, 0.1875]);
        let gates = [vec![0.9, 0.2, 1.0], vec![0.1, 0.0, 0.8]];
        let full: Vec<Vec<f64>> = (0..4).map(|l| gates[mirrored_layer(l, 4)].clone()).collect();
        let stats = GateStats::from_gates(&full).unwrap();
        for variant in [
            Variant::Sparsity,
            Variant::SparsityVariance,
            Variant::Adaptive,
            Variant::Proportional,
            Variant::SparsityVarianceL2,
        ] {
            let mut tape = Tape::<f64>::new();
            let vars: Vec<Var> = gates.iter().map(|g| tape.leaf(Tensor::from_f64(&[3], g).unwrap())).collect();
            let loss = regularization_loss_tape(&mut tape, &vars, &st, variant).unwrap();
            let direct = regularization_loss(&stats, &st, variant).unwrap();
            assert!((tape.value(loss).data()[0] - direct).abs() < 1e-15, "{variant:?}");
        }
    }

    #[test]
    fn update_examples() {
        let cfg = ControllerConfig::default();
        let mut st = state(&[0.0], &[0.0], &[0.5], &[0.25]);
        let stats = GateStats {
            mean: vec![0.9, 0.9],
            var: vec![0.1, 0.1],
        };
        update_coefficients(&mut st, &stats, &cfg).unwrap();
        assert!((st.alpha[0] - 4e-4).abs() < 1e-15);
        assert!((st.beta[0] + 1.5e-4).abs() < 1e-15);

        let mut st = state(&[0.0], &[0.0], &[0.5], &[0.25]);
        let near = GateStats {
            mean: vec![0.505, 0.505],
            var: vec![0.25, 0.25],
        };
        update_coefficients(&mut st, &near, &cfg).unwrap();
        assert_eq!((st.alpha[0], st.beta[0]), (0.0, 0.0));

        let sign = ControllerConfig {
            variant: Variant::Adaptive,
            ..cfg.clone()
        };
        let mut st = state(&[0.0], &[0.0], &[0.5], &[0.25]);
        update_coefficients(&mut st, &stats, &sign).unwrap();
        assert_eq!((st.alpha[0], st.beta[0]), (1e-3, -1e-3));

        let one_sided = ControllerConfig {
            update_condition: UpdateCondition::OneSided,
            ..cfg.clone()
        };
        let mut st = state(&[0.0], &[0.0], &[0.5], &[0.25]);
        update_coefficients(&mut st, &stats, &one_sided).unwrap();
        assert_eq!(st.beta[0], 0.0);

        let fixed = ControllerConfig {
            variant: Variant::SparsityVariance,
            ..cfg
        };
        let mut st = state(&[0.2], &[0.0], &[0.5], &[0.25]);
        update_coefficients(&mut st, &stats, &fixed).unwrap();
        assert_eq!(st.alpha[0], 0.2);
    }

    #[test]
    fn variant_names_round_trip() {
        for name in ["sparsity", "sparsity_variance", "adaptive", "proportional", "sparsity_variance_l2"] {
            let v: Variant = name.parse().unwrap();
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{name}\""));
        }
        assert!("pid".parse::<Variant>().is_err());
    }
}
