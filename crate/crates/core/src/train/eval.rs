use crate::data::{batch_at, eval_offsets};
use crate::flops::{gate_sparsity_report, LayerLoad, SparsityReport};
use crate::kernels;
use crate::model::{GateTrace, Mode, Model};
use crate::{Element, Error, Result};

/// Validation cross-entropy with the gate sparsity it was achieved at.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    /// Mean next-token cross-entropy in nats.
    pub ce: f64,
    pub tokens: usize,
    pub windows: usize,
    pub report: SparsityReport,
    /// Per-layer work of one window, averaged over windows.
    pub loads: Vec<LayerLoad>,
}

/// Evaluates consecutive non-overlapping windows of `seq_len` tokens,
/// `batch` windows per forward pass, at most `max_windows` in total
/// (0 means all).
pub fn evaluate<T: Element>(
    model: &Model<T>,
    tokens: &[u16],
    seq_len: usize,
    batch: usize,
    max_windows: usize,
    mode: Mode,
) -> Result<EvalResult> {
    let mut offsets = eval_offsets(tokens.len(), seq_len);
    if max_windows > 0 {
        offsets.truncate(max_windows);
    }
    if offsets.is_empty() {
        return Err(Error::Contract(format!(
            "validation set of {} tokens holds no window of {}",
            tokens.len(),
            seq_len + 1
        )));
    }
    let mut total = 0.0;
    let mut traces = Vec::new();
    for chunk in offsets.chunks(batch.max(1)) {
        let b = batch_at(tokens, seq_len, chunk)?;
        let out = model.forward(&b.inputs, chunk.len(), mode)?;
        let (ce, _) = kernels::cross_entropy(&out.logits, &b.targets)?;
        total += ce.to_f64_lossy() * b.targets.len() as f64;
        traces.push(out.trace);
    }
    let n_tokens = offsets.len() * seq_len;
    let all = GateTrace::concat(&traces)?;
    Ok(EvalResult {
        ce: total / n_tokens as f64,
        tokens: n_tokens,
        windows: offsets.len(),
        report: gate_sparsity_report(std::slice::from_ref(&all))?,
        loads: LayerLoad::from_trace(&all, offsets.len())?,
    })
}
