use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Flow,
    Autoregressive,
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderKind::Flow => "flow",
            DecoderKind::Autoregressive => "ar",
        })
    }
}

impl FromStr for DecoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow" => Ok(DecoderKind::Flow),
            "ar" | "autoregressive" => Ok(DecoderKind::Autoregressive),
            _ => Err(Error::Config(format!("unknown decoder '{s}'"))),
        }
    }
}

/// Architecture and compression hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Past frames `k`; the policy sees `k + 1` frames.
    pub history_len: usize,
    /// Chunk holds `chunk_len + 1` actions.
    pub chunk_len: usize,
    pub num_blocks: usize,
    /// Compression happens after this many blocks.
    pub split_block: usize,
    pub views: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub instr_len: usize,
    pub instr_vocab: usize,
    pub action_dim: usize,
    /// `false` discards the pooled history instead of feeding it upward.
    pub context_token: bool,
    pub rope_base: f64,
    pub decoder: DecoderKind,
    pub flow_hidden: usize,
    pub tau_dim: usize,
    /// Action-token vocabulary of the autoregressive head.
    pub action_vocab: usize,
    pub max_action_tokens: usize,
    /// Per-dimension scale between environment actions and the model's
    /// normalized `[−1, 1]` range; empty means identity.
    #[serde(default)]
    pub action_scale: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            history_len: 7,
            chunk_len: 7,
            num_blocks: 8,
            split_block: 2,
            views: 1,
            image_height: 32,
            image_width: 32,
            image_channels: 1,
            patch_size: 8,
            hidden_dim: 128,
            heads: 4,
            mlp_ratio: 4,
            instr_len: 8,
            instr_vocab: 16,
            action_dim: 4,
            context_token: true,
            rope_base: 100.0,
            decoder: DecoderKind::Flow,
            flow_hidden: 256,
            tau_dim: 16,
            action_vocab: 640,
            max_action_tokens: 48,
            action_scale: Vec::new(),
        }
    }
}

impl ModelConfig {
    /// Reduced model used for the training experiments on one CPU core.
    pub fn small() -> Self {
        Self {
            num_blocks: 4,
            split_block: 2,
            patch_size: 16,
            hidden_dim: 32,
            heads: 2,
            instr_len: 4,
            flow_hidden: 128,
            ..Self::default()
        }
    }

    /// The model trained on the toy tasks: one patch token per view and a
    /// two-token instruction.
    pub fn toy() -> Self {
        Self { patch_size: 32, instr_len: 2, flow_hidden: 256, ..Self::small() }
    }

    pub fn patch_tokens(&self) -> usize {
        (self.image_height / self.patch_size.max(1)) * (self.image_width / self.patch_size.max(1))
    }

    /// Visual tokens contributed by one timestep (`V × P`).
    pub fn frame_tokens(&self) -> usize {
        self.views * self.patch_tokens()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.image_channels
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_len + 1
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.split_block < 1 || self.split_block > self.num_blocks {
            return bad(format!("need 1 <= split_block <= num_blocks, got {} / {}", self.split_block, self.num_blocks));
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return bad(format!("hidden_dim {} not divisible by heads {}", self.hidden_dim, self.heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad("head dim must be even for rotary frame positions".into());
        }
        if self.patch_size == 0
            || !self.image_height.is_multiple_of(self.patch_size)
            || !self.image_width.is_multiple_of(self.patch_size)
        {
            return bad(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            ));
        }
        if self.patch_tokens() == 0 || self.views == 0 {
            return bad("need at least one patch token and one view".into());
        }
        if self.action_dim == 0 || self.image_channels == 0 || self.mlp_ratio == 0 {
            return bad("action_dim, image_channels and mlp_ratio must be positive".into());
        }
        if self.instr_vocab == 0 {
            return bad("instr_vocab must be positive".into());
        }
        if !self.tau_dim.is_multiple_of(2) || self.flow_hidden == 0 {
            return bad("tau_dim must be even and flow_hidden positive".into());
        }
        if self.decoder == DecoderKind::Autoregressive && (self.action_vocab == 0 || self.max_action_tokens == 0) {
            return bad("autoregressive decoder needs action_vocab and max_action_tokens".into());
        }
        if !(self.action_scale.is_empty() || self.action_scale.len() == self.action_dim)
            || self.action_scale.iter().any(|s| !(s.is_finite() && *s > 0.0))
        {
            return bad(format!("action_scale needs {} positive entries or none", self.action_dim));
        }
        if !(self.rope_base > 1.0) {
            return bad("rope_base must exceed 1".into());
        }
        Ok(())
    }

    /// Flat `key=value` form, one pair per line, in a stable order.
    pub fn to_kv(&self) -> String {
        self.kv_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn kv_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("history_len", self.history_len.to_string()),
            ("chunk_len", self.chunk_len.to_string()),
            ("num_blocks", self.num_blocks.to_string()),
            ("split_block", self.split_block.to_string()),
            ("views", self.views.to_string()),
            ("image_height", self.image_height.to_string()),
            ("image_width", self.image_width.to_string()),
            ("image_channels", self.image_channels.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("instr_len", self.instr_len.to_string()),
            ("instr_vocab", self.instr_vocab.to_string()),
            ("action_dim", self.action_dim.to_string()),
            ("context_token", self.context_token.to_string()),
            ("rope_base", self.rope_base.to_string()),
            ("decoder", self.decoder.to_string()),
            ("flow_hidden", self.flow_hidden.to_string()),
            ("tau_dim", self.tau_dim.to_string()),
            ("action_vocab", self.action_vocab.to_string()),
            ("max_action_tokens", self.max_action_tokens.to_string()),
            ("action_scale", self.action_scale.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")),
        ]
    }

    /// Applies `key=value` overrides on top of `self`. Unknown keys are errors.
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        fn num<T: FromStr>(k: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Config(format!("bad value '{v}' for {k}")))
        }
        for (k, v) in kv {
            match k.as_str() {
                "history_len" => self.history_len = num(k, v)?,
                "chunk_len" => self.chunk_len = num(k, v)?,
                "num_blocks" => self.num_blocks = num(k, v)?,
                "split_block" => self.split_block = num(k, v)?,
                "views" => self.views = num(k, v)?,
                "image_height" => self.image_height = num(k, v)?,
                "image_width" => self.image_width = num(k, v)?,
                "image_channels" => self.image_channels = num(k, v)?,
                "patch_size" => self.patch_size = num(k, v)?,
                "hidden_dim" => self.hidden_dim = num(k, v)?,
                "heads" => self.heads = num(k, v)?,
                "mlp_ratio" => self.mlp_ratio = num(k, v)?,
                "instr_len" => self.instr_len = num(k, v)?,
                "instr_vocab" => self.instr_vocab = num(k, v)?,
                "action_dim" => self.action_dim = num(k, v)?,
                "context_token" => self.context_token = num(k, v)?,
                "rope_base" => self.rope_base = num(k, v)?,
                "decoder" => self.decoder = v.trim().parse()?,
                "flow_hidden" => self.flow_hidden = num(k, v)?,
                "tau_dim" => self.tau_dim = num(k, v)?,
                "action_vocab" => self.action_vocab = num(k, v)?,
                "max_action_tokens" => self.max_action_tokens = num(k, v)?,
                "action_scale" => {
                    self.action_scale =
                        v.split(',').filter(|s| !s.trim().is_empty()).map(|s| num(k, s)).collect::<Result<_>>()?
                }
                _ => return Err(Error::Config(format!("unknown model key '{k}'"))),
            }
        }
        Ok(())
    }

    pub fn action_scale(&self, dim: usize) -> f64 {
        self.action_scale.get(dim).copied().unwrap_or(1.0)
    }

    /// Environment units to the model's normalized range.
    pub fn normalize_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter().enumerate().map(|(d, v)| v / self.action_scale(d)).collect()
    }

    pub fn denormalize_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter().enumerate().map(|(d, v)| v * self.action_scale(d)).collect()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(&parse_kv(text)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}
