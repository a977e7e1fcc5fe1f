//! The gated middle-skip decoder: configuration, weights, gates and the
//! forward passes.

mod checkpoint;
mod config;
mod forward;
pub mod gates;
mod params;
mod tape_forward;

pub use checkpoint::{Checkpoint, MAGIC};
pub use config::TransformerConfig;
pub use forward::{
    block_forward, gated_attention, log_gate, rmsnorm, swiglu_ffn, ForwardOutput, Mode, Model,
};
pub use gates::{compute_gates, mirrored_layer, GateTrace, GATE_EPSILON};
pub use params::{GateParams, LayerParams, Parameters};
pub use tape_forward::{forward_tape, ParamVars, TapeForward};
