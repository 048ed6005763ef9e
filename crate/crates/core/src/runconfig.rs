//! `key = value` run configuration files.
//!
//! ```text
//! # desk run
//! preset = desk
//! d = 48
//! epochs = 20
//! max_lr = 1e-3
//! ```
//! `preset` (`desk` or `full`) is applied before every other key regardless
//! of its position. Unknown keys are rejected.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Seed of the anchor and supernode draws used for evaluation and prediction.
    pub eval_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            eval_seed: 0,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}` expects a number, got `{v}`")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", i + 1)))?;
            pairs.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = Self::default();
        if let Some((_, _, v)) = pairs.iter().rev().find(|(_, k, _)| k == "preset") {
            cfg.set_preset(v)?;
        }
        for (line, k, v) in &pairs {
            if k != "preset" {
                cfg.set(k, v).map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("line {line}: {m}")),
                    other => other,
                })?;
            }
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn set_preset(&mut self, v: &str) -> Result<()> {
        self.model = match v {
            "desk" => ModelConfig::desk(),
            "full" => ModelConfig::full(),
            _ => return Err(Error::Config(format!("unknown preset `{v}`; expected desk or full"))),
        };
        self.preset = v.to_string();
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" => self.set_preset(value),
            "epochs" => Ok(self.train.epochs = num(key, value)?),
            "batch_size" => Ok(self.train.batch_size = num(key, value)?),
            "max_lr" => Ok(self.train.max_lr = num(key, value)?),
            "seed" => Ok(self.train.seed = num(key, value)?),
            "n_vol" => Ok(self.train.n_vol = num(key, value)?),
            "loss_point_policy" => Ok(self.train.loss_policy = value.parse()?),
            "eval_seed" => Ok(self.eval_seed = num(key, value)?),
            _ => self.model.set(key, value),
        }
    }

    /// Effective configuration in the same format, loadable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = format!("preset = {}\n", self.preset);
        for (k, v) in self.model.to_header() {
            s.push_str(&format!("{} = {v}\n", k.trim_start_matches("config.")));
        }
        let t = &self.train;
        s.push_str(&format!(
            "epochs = {}\nbatch_size = {}\nmax_lr = {}\nseed = {}\nn_vol = {}\nloss_point_policy = {}\neval_seed = {}\n",
            t.epochs, t.batch_size, t.max_lr, t.seed, t.n_vol, t.loss_policy, self.eval_seed
        ));
        s
    }
}
