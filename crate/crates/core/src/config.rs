//! Run configuration: dotted `section.key = value` TOML.
//!
//! Omitted keys take their defaults and unknown keys are rejected. The
//! canonical text form lists every key, sorted, one per line, and parses
//! back to an identical configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::{ControllerConfig, UpdateCondition, Variant};
use crate::model::TransformerConfig;
use crate::train::optim::AdamWConfig;
use crate::train::schedule::SchedulerConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Sequences per optimizer step.
    pub batch_size: usize,
    /// Sequences per forward/backward pass; gradients of
    /// `batch_size / device_batch_size` passes are summed.
    pub device_batch_size: usize,
    /// Tokens per training sequence.
    pub seq_len: usize,
    /// Tail fraction of the corpus held out for validation.
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            batch_size: 512,
            device_batch_size: 32,
            seq_len: 1024,
            val_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatingConfig {
    pub enabled: bool,
    pub mu_initial: f64,
    pub mu_final: f64,
    pub variant: Variant,
    pub gamma: f64,
    pub delta: f64,
    pub update_condition: UpdateCondition,
    pub alpha_init: f64,
    pub beta_init: f64,
}

impl Default for GatingConfig {
    fn default() -> Self {
        Self::from_controller(true, &ControllerConfig::default())
    }
}

impl GatingConfig {
    pub fn from_controller(enabled: bool, c: &ControllerConfig) -> Self {
        GatingConfig {
            enabled,
            mu_initial: c.mu_initial,
            mu_final: c.mu_final,
            variant: c.variant,
            gamma: c.gamma,
            delta: c.delta,
            update_condition: c.update_condition,
            alpha_init: c.alpha_init,
            beta_init: c.beta_init,
        }
    }

    pub fn controller(&self) -> ControllerConfig {
        ControllerConfig {
            variant: self.variant,
            gamma: self.gamma,
            delta: self.delta,
            mu_initial: self.mu_initial,
            mu_final: self.mu_final,
            update_condition: self.update_condition,
            alpha_init: self.alpha_init,
            beta_init: self.beta_init,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub total_steps: u64,
    pub corpus_path: String,
    pub out_dir: String,
    /// Steps between validation passes; 0 disables them.
    pub eval_interval: u64,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: u64,
    /// Validation windows per evaluation; 0 uses the whole split.
    pub eval_windows: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            total_steps: 2000,
            corpus_path: "corpus.tok".into(),
            out_dir: "runs".into(),
            eval_interval: 0,
            checkpoint_interval: 0,
            eval_windows: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: TransformerConfig,
    pub data: DataConfig,
    pub optimizer: AdamWConfig,
    pub scheduler: SchedulerConfig,
    pub gating: GatingConfig,
    pub run: RunSection,
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Sorted `key = value` lines for any serializable value.
pub fn canonical_text<S: Serialize>(value: &S) -> Result<String> {
    let v = toml::Value::try_from(value).map_err(|e| Error::Config(e.to_string()))?;
    let mut lines = Vec::new();
    flatten("", &v, &mut lines);
    lines.sort();
    Ok(lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.scheduler.validate()?;
        self.gating.controller().validate()?;
        let d = &self.data;
        if d.batch_size == 0 || d.device_batch_size == 0 || !d.batch_size.is_multiple_of(d.device_batch_size) {
            return Err(Error::Config(format!(
                "batch_size {} must be a positive multiple of device_batch_size {}",
                d.batch_size, d.device_batch_size
            )));
        }
        if d.seq_len == 0 || d.seq_len > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "seq_len {} outside 1..=max_seq_len ({})",
                d.seq_len, self.model.max_seq_len
            )));
        }
        if !(d.val_fraction > 0.0 && d.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction {} outside (0, 1)", d.val_fraction)));
        }
        if self.run.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn canonical_text(&self) -> Result<String> {
        canonical_text(self)
    }

    pub fn micro_batches(&self) -> usize {
        self.data.batch_size / self.data.device_batch_size
    }

    /// A small byte-level configuration for smoke runs and examples.
    pub fn toy() -> Self {
        let mut cfg = RunConfig::default();
        cfg.model = TransformerConfig {
            vocab_size: 256,
            ..TransformerConfig::toy(32, 4, 2, 2, 256)
        };
        cfg.data = DataConfig {
            batch_size: 4,
            device_batch_size: 4,
            seq_len: 32,
            val_fraction: 0.1,
        };
        cfg.run.total_steps = 50;
        cfg
    }
}
