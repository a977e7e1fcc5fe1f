//! Optimization, schedules, the training loop and evaluation.

mod eval;
pub mod optim;
pub mod schedule;
mod trainer;

pub use eval::{evaluate, EvalResult};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::SchedulerConfig;
pub use trainer::{load_model, parse_header, RunSummary, StepMetrics, Trainer};
