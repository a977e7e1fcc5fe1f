//! Soft masks, accumulated masks and mirrored gate values.
//!
//! Gate probe `l < L/2` reads the input of block `l` and emits
//! `s = relu(w . h + b)`. The running sum `S` over the first half decides
//! skipping: block `l` uses `g = 1 - clamp(S_l, 0, 1)` and its mirror block
//! `L - l - 1` reuses the same value, so a token with `S_l >= 1` skips the
//! whole span `[l, L - l)`.

use crate::{kernels, Element, Error, Result, Tensor};

/// Floor applied to gate values before taking logs in gated attention.
pub const GATE_EPSILON: f64 = 1e-6;

/// Per-token, per-layer gate quantities of one forward pass, stored in `f64`
/// whatever the model precision. Outer vectors index layers, inner vectors
/// index tokens (all positions of all sequences in the batch).
#[derive(Clone, Debug, PartialEq)]
pub struct GateTrace {
    pub n_layers: usize,
    /// `L/2` layers of soft masks `s`.
    pub soft_mask: Vec<Vec<f64>>,
    /// `L/2` layers of accumulated masks `S`.
    pub accumulated: Vec<Vec<f64>>,
    /// `L` layers of gates `g`.
    pub gates: Vec<Vec<f64>>,
}

/// Gate of layer `layer` given the accumulated masks of the first half.
pub fn mirrored_layer(layer: usize, n_layers: usize) -> usize {
    if layer < n_layers / 2 {
        layer
    } else {
        n_layers - layer - 1
    }
}

/// `1 - clamp(S, 0, 1)`.
pub fn gate_from_accumulated<T: Element>(acc: T) -> T {
    T::one() - kernels::Unary::Clamp01.apply(acc)
}

impl GateTrace {
    /// Builds the trace from first-half soft masks (`L/2` rows of equal length).
    pub fn from_soft_mask(soft_mask: Vec<Vec<f64>>, n_layers: usize) -> Result<Self> {
        if soft_mask.len() != n_layers / 2 || !n_layers.is_multiple_of(2) {
            return Err(Error::Contract(format!(
                "{} soft-mask layers for an {n_layers}-layer model",
                soft_mask.len()
            )));
        }
        let tokens = soft_mask.first().map_or(0, Vec::len);
        if soft_mask.iter().any(|s| s.len() != tokens) {
            return Err(Error::Contract("ragged soft-mask layers".into()));
        }
        let mut accumulated: Vec<Vec<f64>> = Vec::with_capacity(soft_mask.len());
        for (l, s) in soft_mask.iter().enumerate() {
            let row = match l {
                0 => s.clone(),
                _ => accumulated[l - 1].iter().zip(s).map(|(a, b)| a + b).collect(),
            };
            accumulated.push(row);
        }
        Ok(Self::from_parts(soft_mask, accumulated, n_layers))
    }

    pub(crate) fn from_parts(soft_mask: Vec<Vec<f64>>, accumulated: Vec<Vec<f64>>, n_layers: usize) -> Self {
        let half_gates = accumulated
            .iter()
            .map(|acc| acc.iter().map(|&a| gate_from_accumulated(a)).collect())
            .collect();
        Self::from_first_half(soft_mask, accumulated, half_gates, n_layers)
    }

    /// Assembles a trace from first-half quantities computed elsewhere (in the
    /// model's own precision), mirroring the gates onto the second half.
    pub(crate) fn from_first_half(
        soft_mask: Vec<Vec<f64>>,
        accumulated: Vec<Vec<f64>>,
        half_gates: Vec<Vec<f64>>,
        n_layers: usize,
    ) -> Self {
        let gates = (0..n_layers)
            .map(|l| half_gates[mirrored_layer(l, n_layers)].clone())
            .collect();
        GateTrace {
            n_layers,
            soft_mask,
            accumulated,
            gates,
        }
    }

    /// Trace of a dense model: zero soft masks and unit gates everywhere.
    pub fn dense(tokens: usize, n_layers: usize) -> Self {
        let zeros = vec![vec![0.0; tokens]; n_layers / 2];
        Self::from_parts(zeros.clone(), zeros, n_layers)
    }

    pub fn tokens(&self) -> usize {
        self.gates.first().map_or(0, Vec::len)
    }

    pub fn gate(&self, token: usize, layer: usize) -> f64 {
        self.gates[layer][token]
    }

    /// Number of tokens whose gate is exactly zero, per layer.
    pub fn zero_counts(&self) -> Vec<usize> {
        self.gates
            .iter()
            .map(|g| g.iter().filter(|&&x| x == 0.0).count())
            .collect()
    }

    /// Fraction of tokens with an exactly-zero gate, per layer (`L` entries).
    pub fn layer_sparsity(&self) -> Vec<f64> {
        let n = self.tokens().max(1) as f64;
        self.zero_counts().into_iter().map(|c| c as f64 / n).collect()
    }

    /// Concatenates the tokens of several traces of the same depth.
    pub fn concat(traces: &[GateTrace]) -> Result<GateTrace> {
        let first = traces
            .first()
            .ok_or_else(|| Error::Contract("no gate traces to concatenate".into()))?;
        if traces.iter().any(|t| t.n_layers != first.n_layers) {
            return Err(Error::Contract("gate traces of different depth".into()));
        }
        let join = |pick: fn(&GateTrace) -> &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            (0..pick(first).len())
                .map(|l| traces.iter().flat_map(|t| pick(t)[l].iter().copied()).collect())
                .collect()
        };
        Ok(GateTrace {
            n_layers: first.n_layers,
            soft_mask: join(|t| &t.soft_mask),
            accumulated: join(|t| &t.accumulated),
            gates: join(|t| &t.gates),
        })
    }
}

/// Soft mask `relu(h . w + b)` of every row of `h`.
pub fn soft_mask<T: Element>(h: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Vec<T>> {
    let pre = kernels::matmul(h, weight)?;
    if pre.last_dim() != 1 || bias.numel() != 1 {
        return Err(Error::shape("soft_mask", weight.shape(), bias.shape()));
    }
    let b = bias.data()[0];
    Ok(pre
        .data()
        .iter()
        .map(|&p| kernels::Unary::Relu.apply(p + b))
        .collect())
}

/// Gate trace from the inputs of each gate layer (`inputs[l]` is the input
/// of block `l`, `N x d`) and the probe weights.
pub fn compute_gates<T: Element>(
    inputs: &[Tensor<T>],
    weights: &[Tensor<T>],
    biases: &[Tensor<T>],
    n_layers: usize,
) -> Result<GateTrace> {
    if inputs.len() != n_layers / 2 || weights.len() != inputs.len() || biases.len() != inputs.len() {
        return Err(Error::Contract(format!(
            "need {} gate inputs and probes, got {}/{}/{}",
            n_layers / 2,
            inputs.len(),
            weights.len(),
            biases.len()
        )));
    }
    let soft = inputs
        .iter()
        .zip(weights)
        .zip(biases)
        .map(|((h, w), b)| Ok(soft_mask(h, w, b)?.iter().map(|x| x.to_f64_lossy()).collect()))
        .collect::<Result<Vec<Vec<f64>>>>()?;
    GateTrace::from_soft_mask(soft, n_layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_preactivation_gives_unit_gate() {
        let h = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 0.0]).unwrap();
        let w = Tensor::from_f64(&[2, 1], &[-0.5, 0.0]).unwrap();
        let b = Tensor::scalar(0.0);
        let tr = compute_gates(&[h], &[w], &[b], 2).unwrap();
        assert_eq!(tr.soft_mask[0], vec![0.0]);
        assert_eq!(tr.gates, vec![vec![1.0], vec![1.0]]);
    }

    #[test]
    fn accumulation_and_mirroring() {
        let tr = GateTrace::from_soft_mask(vec![vec![0.3], vec![0.9]], 4).unwrap();
        assert!((tr.accumulated[1][0] - 1.2).abs() < 1e-15);
        let g: Vec<f64> = (0..4).map(|l| tr.gate(0, l)).collect();
        assert!((g[0] - 0.7).abs() < 1e-15);
        assert_eq!(g[1], 0.0);
        assert_eq!(g[2], 0.0);
        assert_eq!(g[0], g[3]);
        assert_eq!(tr.layer_sparsity(), vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_probe_is_dense() {
        let h = Tensor::<f32>::from_f64(&[3, 2], &[1., -2., 0.5, 4., -1., 1.]).unwrap();
        let w = Tensor::zeros(&[2, 1]);
        let b = Tensor::zeros(&[1]);
        let tr = compute_gates(
            &[h.clone(), h],
            &[w.clone(), w],
            &[b.clone(), b],
            4,
        )
        .unwrap();
        assert_eq!(tr, GateTrace::dense(3, 4));
        assert_eq!(tr.layer_sparsity(), vec![0.0; 4]);
    }

    #[test]
    fn concat_pools_tokens() {
        let a = GateTrace::from_soft_mask(vec![vec![1.0, 0.0]], 2).unwrap();
        let b = GateTrace::from_soft_mask(vec![vec![0.0, 0.0]], 2).unwrap();
        let c = GateTrace::concat(&[a, b]).unwrap();
        assert_eq!(c.tokens(), 4);
        assert_eq!(c.layer_sparsity(), vec![0.25, 0.25]);
    }
}
