use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde_json::{Map, Value};

use super::eval::{evaluate, EvalResult};
use super::optim::AdamW;
use crate::config::RunConfig;
use crate::controller::{batch_gate_stats, regularization_loss_tape, update_coefficients, ControllerState};
use crate::data::sample_batch;
use crate::flops::FlopsReport;
use crate::model::{forward_tape, Checkpoint, GateTrace, Mode, Model, Parameters};
use crate::rng::RngService;
use crate::tape::Tape;
use crate::{Error, Result, Tensor};

/// Everything logged for one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss_ce: f64,
    pub loss_reg: f64,
    /// Per-layer gate mean, `L` entries.
    pub g_mean: Vec<f64>,
    pub g_var: Vec<f64>,
    pub z: Vec<f64>,
    /// Controller coefficients after this step's update, `L/2` entries.
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl StepMetrics {
    /// One JSON object with keys in a fixed order: `step`, `lr`, `loss_ce`,
    /// `loss_reg`, then `g_mean_l`, `g_var_l`, `z_l` for every layer and
    /// `alpha_l`, `beta_l` for every gate layer.
    pub fn to_json(&self) -> String {
        let mut m = Map::new();
        m.insert("step".into(), Value::from(self.step));
        m.insert("lr".into(), Value::from(self.lr));
        m.insert("loss_ce".into(), Value::from(self.loss_ce));
        m.insert("loss_reg".into(), Value::from(self.loss_reg));
        let groups: [(&str, &Vec<f64>); 5] = [
            ("g_mean", &self.g_mean),
            ("g_var", &self.g_var),
            ("z", &self.z),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
        ];
        for (name, values) in groups {
            for (l, &v) in values.iter().enumerate() {
                m.insert(format!("{name}_{l}"), Value::from(v));
            }
        }
        Value::Object(m).to_string()
    }
}

/// Outcome of [`Trainer::run`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub metrics: Vec<StepMetrics>,
    pub evals: Vec<(u64, EvalResult)>,
    pub final_eval: EvalResult,
    pub flops: FlopsReport,
}

impl RunSummary {
    pub const CSV_HEADER: &'static str = "model.n_layers,zeros,infer_flops,loss";

    /// One row under [`Self::CSV_HEADER`]: depth, overall validation gate
    /// sparsity, estimated per-sequence inference FLOPs, validation CE.
    pub fn csv_row(&self, n_layers: usize) -> String {
        format!(
            "{},{},{},{}",
            n_layers, self.final_eval.report.overall, self.flops.gated_flops, self.final_eval.ce
        )
    }
}

/// Model, optimizer and controller state of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub params: Parameters<f32>,
    pub optimizer: AdamW<f32>,
    pub controller: ControllerState,
    /// Number of completed optimizer steps.
    pub step: u64,
    names: Vec<String>,
}

const STATE_KEY: &str = "state";

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let rng = RngService::new(config.run.seed);
        let params = Parameters::init(&config.model, config.gating.enabled, &rng)?;
        Self::with_parameters(config, params)
    }

    /// Fresh optimizer and controller around given weights.
    pub fn with_parameters(config: RunConfig, params: Parameters<f32>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config.model)?;
        if params.is_gated() != config.gating.enabled {
            return Err(Error::ConfigMismatch("gate probes do not match gating.enabled".into()));
        }
        let named = params.named();
        let shapes: Vec<Vec<usize>> = named.iter().map(|(_, t)| t.shape().to_vec()).collect();
        let names = named.into_iter().map(|(n, _)| n).collect();
        Ok(Trainer {
            optimizer: AdamW::new(config.optimizer.clone(), &shapes),
            controller: ControllerState::new(config.model.n_layers, &config.gating.controller())?,
            config,
            params,
            step: 0,
            names,
        })
    }

    pub fn model(&self) -> Model<f32> {
        Model {
            config: self.config.model.clone(),
            params: self.params.clone(),
        }
    }

    fn mode(&self) -> Mode {
        if self.config.gating.enabled {
            Mode::GatedMultiply
        } else {
            Mode::Dense
        }
    }

    /// Samples the batch of the current step, takes one optimizer step and
    /// updates the controller.
    pub fn train_step(&mut self, corpus: &[u16]) -> Result<StepMetrics> {
        let t = self.step;
        let cfg = &self.config;
        let total = cfg.run.total_steps;
        if t >= total {
            return Err(Error::Contract(format!("run already finished {total} steps")));
        }
        let lr = cfg.scheduler.lr_at_step(t, total, cfg.optimizer.lr)?;
        let rng = RngService::new(cfg.run.seed);
        let (n, per) = (cfg.data.seq_len, cfg.data.device_batch_size);
        let batch = sample_batch(corpus, cfg.data.batch_size, n, &mut rng.stream_at("data", t))?;
        let micro = cfg.micro_batches();
        let gated = cfg.gating.enabled;
        let variant = cfg.gating.variant;
        let mode = self.mode();

        let mut grads: Vec<Tensor<f32>> = Vec::new();
        let mut traces = Vec::with_capacity(micro);
        let (mut ce_sum, mut reg_sum) = (0.0, 0.0);
        for mb in 0..micro {
            let span = mb * per * n..(mb + 1) * per * n;
            let mut tape = Tape::<f32>::new();
            let fwd = forward_tape(&mut tape, &self.params, &cfg.model, &batch.inputs[span.clone()], per, mode)?;
            let ce = tape.cross_entropy(fwd.logits, &batch.targets[span])?;
            let (loss, reg) = if gated {
                let reg = regularization_loss_tape(&mut tape, &fwd.gates, &self.controller, variant)?;
                (tape.add(ce, reg)?, Some(reg))
            } else {
                (ce, None)
            };
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!("loss {loss_value} at step {t}")));
            }
            ce_sum += tape.value(ce).data()[0] as f64;
            reg_sum += reg.map_or(0.0, |r| tape.value(r).data()[0] as f64);
            let g = tape.backward(loss)?;
            let step_grads = fwd
                .params
                .all()
                .iter()
                .map(|&v| g.get_or_zeros(v, tape.value(v).shape()));
            if grads.is_empty() {
                grads = step_grads.collect();
            } else {
                for (acc, gi) in grads.iter_mut().zip(step_grads) {
                    for (a, &b) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += b;
                    }
                }
            }
            let tokens = per * n;
            traces.push(if gated {
                let rows = |vars: &[crate::tape::Var]| -> Vec<Vec<f64>> {
                    vars.iter().map(|&v| tape.value(v).to_f64_vec()).collect()
                };
                GateTrace::from_first_half(
                    rows(&fwd.soft_mask),
                    rows(&fwd.accumulated),
                    rows(&fwd.gates),
                    cfg.model.n_layers,
                )
            } else {
                GateTrace::dense(tokens, cfg.model.n_layers)
            });
        }
        if micro > 1 {
            let scale = 1.0 / micro as f32;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
        }
        self.optimizer.step(self.params.tensors_mut(), &grads, &self.names, lr)?;
        let trace = GateTrace::concat(&traces)?;
        let stats = batch_gate_stats(&trace)?;
        if gated {
            update_coefficients(&mut self.controller, &stats, &self.config.gating.controller())?;
        }
        self.step += 1;
        Ok(StepMetrics {
            step: t,
            lr,
            loss_ce: ce_sum / micro as f64,
            loss_reg: reg_sum / micro as f64,
            z: trace.layer_sparsity(),
            g_mean: stats.mean,
            g_var: stats.var,
            alpha: self.controller.alpha.clone(),
            beta: self.controller.beta.clone(),
        })
    }

    /// Validation pass in the inference mode of this run (skip for gated
    /// models).
    pub fn evaluate(&self, val: &[u16]) -> Result<EvalResult> {
        let mode = if self.config.gating.enabled { Mode::GatedSkip } else { Mode::Dense };
        let cfg = &self.config;
        evaluate(
            &self.model(),
            val,
            cfg.data.seq_len,
            cfg.data.device_batch_size,
            cfg.run.eval_windows,
            mode,
        )
    }

    /// Trains until `until` completed steps (or the configured total),
    /// appending metrics to `out_dir/metrics.jsonl` and writing
    /// checkpoints when `out_dir` is given. A non-finite loss leaves
    /// `out_dir/crash.ckpt` with the state before the failing step.
    pub fn run(&mut self, train: &[u16], val: &[u16], out_dir: Option<&Path>, until: Option<u64>) -> Result<RunSummary> {
        self.run_observed(train, val, out_dir, until, |_, _| {})
    }

    /// [`Self::run`] with a callback after every step and every evaluation.
    pub fn run_observed(
        &mut self,
        train: &[u16],
        val: &[u16],
        out_dir: Option<&Path>,
        until: Option<u64>,
        mut observe: impl FnMut(&StepMetrics, Option<&EvalResult>),
    ) -> Result<RunSummary> {
        let total = self.config.run.total_steps;
        let until = until.unwrap_or(total).min(total);
        let mut log = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(OpenOptions::new().create(true).append(true).open(dir.join("metrics.jsonl"))?)
            }
            None => None,
        };
        let mut metrics = Vec::new();
        let mut evals = Vec::new();
        let (eval_every, ckpt_every) = (self.config.run.eval_interval, self.config.run.checkpoint_interval);
        while self.step < until {
            let m = match self.train_step(train) {
                Ok(m) => m,
                Err(e @ Error::NonFinite(_)) => {
                    if let Some(dir) = out_dir {
                        self.save(&dir.join("crash.ckpt"))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", m.to_json())?;
            }
            if eval_every > 0 && self.step.is_multiple_of(eval_every) {
                let e = self.evaluate(val)?;
                observe(&m, Some(&e));
                evals.push((self.step, e));
            } else {
                observe(&m, None);
            }
            metrics.push(m);
            if let (Some(dir), true) = (out_dir, ckpt_every > 0 && self.step.is_multiple_of(ckpt_every)) {
                self.save(&dir.join(format!("step_{}.ckpt", self.step)))?;
            }
        }
        let final_eval = self.evaluate(val)?;
        let flops = FlopsReport::new(
            &self.config.model,
            self.config.gating.enabled,
            self.config.data.seq_len,
            &final_eval.report.layer_sparsity,
            Some(&final_eval.loads),
        )?;
        let summary = RunSummary {
            metrics,
            evals,
            final_eval,
            flops,
        };
        if let Some(dir) = out_dir {
            self.save(&dir.join("final.ckpt"))?;
            let mut csv = File::create(dir.join("summary.csv"))?;
            writeln!(csv, "{}", RunSummary::CSV_HEADER)?;
            writeln!(csv, "{}", summary.csv_row(self.config.model.n_layers))?;
        }
        Ok(summary)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut table = toml::Table::new();
        table.insert("step".into(), toml::Value::Integer(self.step as i64));
        table.insert("optimizer_t".into(), toml::Value::Integer(self.optimizer.t as i64));
        let floats = |v: &[f64]| toml::Value::Array(v.iter().map(|&x| toml::Value::Float(x)).collect());
        table.insert("alpha".into(), floats(&self.controller.alpha));
        table.insert("beta".into(), floats(&self.controller.beta));
        let mut header = self.config.canonical_text()?;
        let mut wrapped = toml::Table::new();
        wrapped.insert(STATE_KEY.into(), toml::Value::Table(table));
        header.push_str(&crate::config::canonical_text(&wrapped)?);
        let mut ck = Checkpoint::from_parameters(header, &self.params);
        for (which, moments) in [("m", &self.optimizer.m), ("v", &self.optimizer.v)] {
            for (name, t) in self.names.iter().zip(moments) {
                ck.tensors.push((format!("optim.{which}.{name}"), t.clone()));
            }
        }
        Ok(ck)
    }

    /// Restores a run. With `expected`, every setting except the file
    /// locations must match the stored configuration.
    pub fn from_checkpoint(mut ck: Checkpoint, expected: Option<&RunConfig>) -> Result<Self> {
        let (config, state) = parse_header(&ck.header)?;
        if let Some(want) = expected {
            let strip = |c: &RunConfig| {
                let mut c = c.clone();
                c.run.corpus_path.clear();
                c.run.out_dir.clear();
                c
            };
            if strip(want) != strip(&config) {
                return Err(Error::ConfigMismatch(
                    "checkpoint was written with a different configuration".into(),
                ));
            }
        }
        let params = ck.take_parameters(Parameters::zeros(&config.model, config.gating.enabled))?;
        let mut trainer = Trainer::with_parameters(config, params)?;
        let state = state.ok_or_else(|| Error::Format("checkpoint has no training state".into()))?;
        let int = |key: &str| -> Result<u64> {
            state
                .get(key)
                .and_then(toml::Value::as_integer)
                .and_then(|i| u64::try_from(i).ok())
                .ok_or_else(|| Error::Format(format!("missing state.{key}")))
        };
        let floats = |key: &str| -> Result<Vec<f64>> {
            state
                .get(key)
                .and_then(toml::Value::as_array)
                .and_then(|a| a.iter().map(toml::Value::as_float).collect::<Option<Vec<_>>>())
                .ok_or_else(|| Error::Format(format!("missing state.{key}")))
        };
        trainer.step = int("step")?;
        trainer.optimizer.t = int("optimizer_t")?;
        let (alpha, beta) = (floats("alpha")?, floats("beta")?);
        if alpha.len() != trainer.controller.gate_layers() || beta.len() != alpha.len() {
            return Err(Error::ConfigMismatch("controller state has the wrong depth".into()));
        }
        trainer.controller.alpha = alpha;
        trainer.controller.beta = beta;
        for i in 0..trainer.names.len() {
            for which in ["m", "v"] {
                let name = format!("optim.{which}.{}", trainer.names[i]);
                let t = ck
                    .take(&name)
                    .ok_or_else(|| Error::Format(format!("checkpoint has no tensor {name}")))?;
                let slot = if which == "m" { &mut trainer.optimizer.m[i] } else { &mut trainer.optimizer.v[i] };
                if t.shape() != slot.shape() {
                    return Err(Error::ConfigMismatch(format!("{name} has shape {:?}", t.shape())));
                }
                *slot = t;
            }
        }
        if let Some((name, _)) = ck.tensors.first() {
            return Err(Error::Format(format!("unexpected tensor {name} in checkpoint")));
        }
        Ok(trainer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path, expected: Option<&RunConfig>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?, expected)
    }
}

/// Splits a checkpoint header into the run configuration and the optional
/// `state` table.
pub fn parse_header(header: &str) -> Result<(RunConfig, Option<toml::Table>)> {
    let mut table: toml::Table = toml::from_str(header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let state = match table.remove(STATE_KEY) {
        Some(toml::Value::Table(t)) => Some(t),
        Some(_) => return Err(Error::Format("checkpoint state is not a table".into())),
        None => None,
    };
    let config: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    config.validate()?;
    Ok((config, state))
}

/// Loads the model stored in any checkpoint written by [`Trainer::save`].
pub fn load_model(path: &Path) -> Result<(RunConfig, Model<f32>)> {
    let mut ck = Checkpoint::load(path)?;
    let (config, _) = parse_header(&ck.header)?;
    let params = ck.take_parameters(Parameters::zeros(&config.model, config.gating.enabled))?;
    let model = Model::new(config.model.clone(), params)?;
    Ok((config, model))
}
