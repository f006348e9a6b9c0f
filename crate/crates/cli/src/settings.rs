use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use ctxp_core::backbone::{parse_kv, DecoderKind, ModelConfig};
use ctxp_core::train::TrainConfig;
use serde::Serialize;

use crate::Usage;

/// Model and training options shared by `train` and `ablate`. Precedence,
/// lowest first: preset, `--config` file, `--set` pairs, dedicated flags.
#[derive(Args, Clone, Debug)]
pub struct ConfigArgs {
    /// Training hyperparameter preset (toy | paper).
    #[arg(long, default_value = "toy")]
    pub preset: String,
    /// Flat key=value file with model and training keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra key=value overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub decoder: Option<DecoderKind>,
    /// Frames seen per decision (history plus current).
    #[arg(long)]
    pub frames: Option<usize>,
    /// Block after which past frames are pooled into the context token.
    #[arg(long = "split-n")]
    pub split_n: Option<usize>,
    /// Total transformer blocks.
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Drop past frames after the split instead of pooling them.
    #[arg(long = "no-context-token")]
    pub no_context_token: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn model_keys() -> BTreeSet<String> {
    parse_kv(&ModelConfig::default().to_kv()).map(|m| m.into_keys().collect()).unwrap_or_default()
}

impl Settings {
    pub fn preset(name: &str) -> Result<Self> {
        Ok(Self { model: ModelConfig::toy(), train: TrainConfig::preset(name)? })
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let in_model = model_keys().contains(key);
        if in_model {
            self.model.apply_kv(&BTreeMap::from([(key.to_string(), value.to_string())]))?;
        }
        let in_train = self.train.apply_kv(key, value)?;
        if !(in_model || in_train) {
            return Err(Usage(format!("unknown config key '{key}'")).into());
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Usage(format!("cannot read config {}: {e}", path.display())))?;
        for (k, v) in parse_kv(&text)? {
            self.apply(&k, &v).with_context(|| format!("in {}", path.display()))?;
        }
        Ok(())
    }

    pub fn from_args(a: &ConfigArgs) -> Result<Self> {
        let mut s = Self::preset(&a.preset)?;
        if let Some(p) = &a.config {
            s.apply_file(p)?;
        }
        for pair in &a.sets {
            let (k, v) = pair.split_once('=').ok_or_else(|| Usage(format!("expected KEY=VALUE, got '{pair}'")))?;
            s.apply(k.trim(), v.trim())?;
        }
        if let Some(d) = a.decoder {
            s.model.decoder = d;
            s.train.decoder = d;
        }
        if let Some(f) = a.frames {
            if f == 0 {
                return Err(Usage("--frames must be at least 1".into()).into());
            }
            s.model.history_len = f - 1;
        }
        if let Some(n) = a.blocks {
            s.model.num_blocks = n;
        }
        if let Some(n) = a.split_n {
            s.model.split_block = n;
        }
        if let Some(n) = a.iters {
            s.train.total_iters = n;
            s.train.warmup_iters = s.train.warmup_iters.min(n);
        }
        if let Some(seed) = a.seed {
            s.train.seed = seed;
        }
        if a.no_context_token {
            s.model.context_token = false;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let train: String = self.train.to_kv().lines().filter(|l| !l.starts_with("decoder=")).map(|l| format!("{l}\n")).collect();
        format!("{}{train}", self.model.to_kv())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }
}
