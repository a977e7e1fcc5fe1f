//! Finite-difference check of the full training loss gradient.
//!
//! The analytic side is the tape; the numeric side re-evaluates the loss
//! with the tape-free executor under central differences. The evaluation
//! point is chosen so that every relu pre-activation and every accumulated
//! mask sits at least [`KINK_MARGIN`] away from a kink.

use rand::Rng;

use crate::controller::{
    batch_gate_stats, regularization_loss, regularization_loss_tape, ControllerState, Variant,
};
use crate::kernels;
use crate::model::{forward_tape, Mode, Model, Parameters, TransformerConfig, GATE_EPSILON};
use crate::rng::RngService;
use crate::tape::Tape;
use crate::{Error, Result};

pub const FD_STEP: f64 = 1e-5;
pub const KINK_MARGIN: f64 = 1e-3;
/// Denominator floor of [`rel_error`].
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Parameter element with the largest error, as `name[index]`.
    pub worst: String,
    pub checked: usize,
    /// Smallest distance of any pre-activation or accumulated mask to a kink.
    pub kink_distance: f64,
    /// Number of gate values that are exactly zero at the checked point.
    pub zero_gates: usize,
}

/// Setup of one check: model shape, sequence length and seed.
#[derive(Clone, Debug)]
pub struct GradcheckSetup {
    pub model: TransformerConfig,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for GradcheckSetup {
    fn default() -> Self {
        GradcheckSetup {
            model: TransformerConfig::toy(8, 4, 2, 1, 16),
            seq_len: 6,
            seed: 0,
        }
    }
}

fn controller(n_layers: usize) -> ControllerState {
    let half = n_layers / 2;
    ControllerState {
        alpha: (0..half).map(|l| 0.7 - 0.5 * l as f64).collect(),
        beta: (0..half).map(|l| 1.3 - 0.4 * l as f64).collect(),
        mu_target: vec![1.0; half],
        var_target: vec![0.0; half],
    }
}

/// Training loss (cross-entropy plus the mean/variance regularizer)
/// evaluated without a tape.
fn loss(model: &Model<f64>, ids: &[usize], targets: &[usize], state: &ControllerState) -> Result<f64> {
    let out = model.forward(ids, 1, Mode::GatedMultiply)?;
    let (ce, _) = kernels::cross_entropy(&out.logits, targets)?;
    let stats = batch_gate_stats(&out.trace)?;
    Ok(ce + regularization_loss(&stats, state, Variant::SparsityVariance)?)
}

/// Distance of the gating nonlinearities to their kinks, and the number of
/// exactly-zero gates.
fn kink_distance(model: &Model<f64>, ids: &[usize]) -> Result<(f64, usize)> {
    let out = model.forward(ids, 1, Mode::GatedMultiply)?;
    let tr = &out.trace;
    let mut dist = f64::INFINITY;
    for acc in &tr.accumulated {
        for &s in acc {
            dist = dist.min(s.abs()).min((s - 1.0).abs());
        }
    }
    for g in &tr.gates {
        for &x in g {
            if x != 0.0 {
                dist = dist.min((x - GATE_EPSILON).abs());
            }
        }
    }
    // relu kinks: a soft mask of exactly zero means a pre-activation at or
    // below zero; recompute pre-activations through the layer inputs.
    for s in &tr.soft_mask {
        for &x in s {
            if x == 0.0 {
                return Ok((0.0, 0));
            }
            dist = dist.min(x);
        }
    }
    let zeros = tr.gates.iter().flatten().filter(|&&x| x == 0.0).count();
    Ok((dist, zeros))
}

/// Searches seeds for a kink-free point, then compares every parameter
/// gradient against central differences.
pub fn gradcheck(setup: &GradcheckSetup) -> Result<GradcheckReport> {
    let cfg = &setup.model;
    cfg.validate()?;
    let n = setup.seq_len;
    let mut chosen = None;
    for attempt in 0..256u64 {
        let rng = RngService::new(setup.seed.wrapping_add(attempt));
        let mut params = Parameters::<f64>::init(cfg, true, &rng)?;
        let mut draw = rng.stream("gradcheck");
        for (l, g) in params.gates.iter_mut().enumerate() {
            g.weight.data_mut().iter_mut().for_each(|w| *w *= 20.0);
            g.bias.data_mut()[0] = 0.3 + 0.25 * l as f64 + draw.random_range(0.0..0.2);
        }
        let ids: Vec<usize> = (0..n).map(|_| draw.random_range(0..cfg.vocab_size)).collect();
        let targets: Vec<usize> = (0..n).map(|_| draw.random_range(0..cfg.vocab_size)).collect();
        let model = Model::new(cfg.clone(), params)?;
        let (dist, zeros) = kink_distance(&model, &ids)?;
        if dist >= KINK_MARGIN {
            chosen = Some((model, ids, targets, dist, zeros));
            break;
        }
    }
    let (mut model, ids, targets, dist, zeros) =
        chosen.ok_or_else(|| Error::Contract("no kink-free evaluation point found".into()))?;
    let state = controller(cfg.n_layers);

    let mut tape = Tape::<f64>::new();
    let fwd = forward_tape(&mut tape, &model.params, cfg, &ids, 1, Mode::GatedMultiply)?;
    let ce = tape.cross_entropy(fwd.logits, &targets)?;
    let reg = regularization_loss_tape(&mut tape, &fwd.gates, &state, Variant::SparsityVariance)?;
    let total = tape.add(ce, reg)?;
    let grads = tape.backward(total)?;
    let analytic: Vec<_> = fwd
        .params
        .all()
        .iter()
        .map(|&v| grads.get_or_zeros(v, tape.value(v).shape()))
        .collect();
    let names: Vec<String> = model.params.named().into_iter().map(|(n, _)| n).collect();

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        kink_distance: dist,
        zero_gates: zeros,
    };
    for (i, name) in names.iter().enumerate() {
        for j in 0..analytic[i].numel() {
            let orig = model.params.tensors_mut()[i].data()[j];
            model.params.tensors_mut()[i].data_mut()[j] = orig + FD_STEP;
            let up = loss(&model, &ids, &targets, &state)?;
            model.params.tensors_mut()[i].data_mut()[j] = orig - FD_STEP;
            let down = loss(&model, &ids, &targets, &state)?;
            model.params.tensors_mut()[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = rel_error(analytic[i].data()[j], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = err;
                report.worst = format!("{name}[{j}]");
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(1.0, 1.0), 0.0);
        assert_eq!(rel_error(2.0, 1.0), 0.5);
        assert!((rel_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn small_model_passes() {
        let setup = GradcheckSetup {
            model: TransformerConfig::toy(4, 2, 2, 2, 8),
            seq_len: 3,
            seed: 1,
        };
        let r = gradcheck(&setup).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert!(r.kink_distance >= KINK_MARGIN);
        assert_eq!(r.checked, Parameters::<f64>::zeros(&setup.model, true).num_params());
    }
}
