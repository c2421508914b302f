//! Experiment configuration files.
//!
//! A file is a JSON object with optional `backbone`, `aspn`, `head`, `train`
//! and `data` sections. Every field is optional and overrides the chosen
//! preset; unknown fields are rejected.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::aspn::AspnConfig;
use crate::error::{Error, Result};
use crate::model::{AdamWConfig, HeadConfig};
use crate::mrdcb::BackboneConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Seeds parameter init and the shuffling stream.
    pub seed: u64,
    /// Stop after this many epochs without a validation mAP improvement.
    pub early_stop_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        TrainConfig {
            batch_size: 16,
            epochs: 300,
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
            seed: 0,
            early_stop_patience: None,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.adamw().validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_frac: f64,
    pub hflip: bool,
    pub vflip: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_frac: 0.8,
            hflip: false,
            vflip: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// 64x64 images, 60 epochs at learning rate 1e-3.
    Desk,
    /// The published schedule: 300 epochs.
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!("unknown preset {s:?}; expected desk or paper"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub aspn: AspnConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.train.epochs = 60;
        cfg.train.lr = 1e-3;
        cfg
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.aspn.validate()?;
        self.head.validate()?;
        self.train.validate()?;
        if !(self.data.train_frac > 0.0 && self.data.train_frac <= 1.0) {
            return Err(Error::Config(format!(
                "train_frac must lie in (0, 1], got {}",
                self.data.train_frac
            )));
        }
        Ok(())
    }

    /// Applies the fields present in `json` on top of `self`.
    pub fn overlay(&self, json: &str) -> Result<Self> {
        let patch: Value = serde_json::from_str(json)?;
        if !patch.is_object() {
            return Err(Error::Config("configuration must be a JSON object".into()));
        }
        let mut base = serde_json::to_value(self)?;
        merge(&mut base, patch);
        let cfg: ExperimentConfig = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Preset) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::preset(preset)
            .overlay(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
