//! Run configuration: one TOML document covering data generation, the model,
//! training, and evaluation. Unknown keys are rejected; every run echoes its
//! effective config into the output directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DasMode, IlOrder, ModelConfig};
use crate::objective::Task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // Model.
    pub d: usize,
    pub heads: usize,
    pub n_rec: usize,
    pub k: usize,
    pub h: usize,
    pub f: usize,
    pub r_m: f64,
    pub r_f: f64,
    pub r_h: f64,
    pub das_mode: String,
    pub il_order: String,
    pub disable_fa: bool,
    pub disable_ha: bool,
    // Data.
    pub data_dir: String,
    pub train_scenarios: usize,
    pub val_scenarios: usize,
    pub kinds: Vec<String>,
    pub sample_rate_hz: f64,
    // Training and evaluation.
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient L2-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub task: String,
    pub mr_threshold: f64,
    pub mask_ratio: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            d: 32,
            heads: 4,
            n_rec: 2,
            k: 6,
            h: 10,
            f: 15,
            r_m: 50.0,
            r_f: 50.0,
            r_h: 50.0,
            das_mode: "dynamic".into(),
            il_order: "inverse".into(),
            disable_fa: false,
            disable_ha: false,
            data_dir: "data".into(),
            train_scenarios: 2000,
            val_scenarios: 400,
            kinds: vec!["follow".into(), "intersection".into(), "merge".into(), "curve".into()],
            sample_rate_hz: 10.0,
            epochs: 30,
            lr: 5e-4,
            weight_decay: 1e-4,
            clip_norm: 5.0,
            batch_size: 8,
            seed: 0,
            task: "joint".into(),
            mr_threshold: 2.0,
            mask_ratio: 0.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d ({}) must be a positive multiple of heads ({})", self.d, self.heads));
        }
        if self.k == 0 || self.h < 2 || self.f == 0 {
            return bad(format!("k ({}), h ({}), f ({}) out of range", self.k, self.h, self.f));
        }
        if self.das_mode == "dynamic" && self.f < self.h {
            return bad(format!("dynamic anchors need f ({}) >= h ({})", self.f, self.h));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio {} must be in [0, 1)", self.mask_ratio));
        }
        if self.kinds.is_empty() {
            return bad("kinds must not be empty".into());
        }
        for kind in &self.kinds {
            if crate::scene::Kind::parse(kind).is_none() {
                return bad(format!("unknown scenario kind {kind:?}"));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if self.clip_norm < 0.0 {
            return bad(format!("clip_norm {} must be >= 0", self.clip_norm));
        }
        self.model_config()?;
        self.task()?;
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let das_mode = match self.das_mode.as_str() {
            "dynamic" => DasMode::Dynamic,
            "midpoint" => DasMode::Midpoint,
            other => return Err(Error::Config(format!("das_mode {other:?} (want dynamic|midpoint)"))),
        };
        let il_order = match self.il_order.as_str() {
            "inverse" => IlOrder::Inverse,
            "forward" => IlOrder::Forward,
            other => return Err(Error::Config(format!("il_order {other:?} (want inverse|forward)"))),
        };
        Ok(ModelConfig {
            d: self.d,
            heads: self.heads,
            n_rec: self.n_rec,
            k: self.k,
            h: self.h,
            f: self.f,
            r_m: self.r_m,
            r_f: self.r_f,
            r_h: self.r_h,
            das_mode,
            il_order,
            disable_fa: self.disable_fa,
            disable_ha: self.disable_ha,
        })
    }

    pub fn task(&self) -> Result<Task> {
        Task::parse(&self.task)
            .ok_or_else(|| Error::Config(format!("task {:?} (want joint|marginal)", self.task)))
    }

    /// Load a config file (or defaults when `path` is None) and apply
    /// `key=value` overrides, then validate.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut table: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                text.parse()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for ov in overrides {
            let Some((key, _)) = ov.split_once('=') else {
                return Err(Error::Config(format!("override {ov:?} is not key=value")));
            };
            let parsed: toml::Table = ov
                .parse()
                .map_err(|e| Error::Config(format!("override {ov:?}: {e}")))?;
            let value = parsed
                .get(key.trim())
                .cloned()
                .ok_or_else(|| Error::Config(format!("override {ov:?} has no value")))?;
            table.insert(key.trim().to_string(), value);
        }
        // Fill unset keys from defaults, then reject unknown keys on decode.
        let defaults = toml::Table::try_from(RunConfig::default())
            .map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in defaults {
            table.entry(k).or_insert(v);
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}
