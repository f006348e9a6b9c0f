use std::f64::consts::PI;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::DecoderKind;
use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub batch: usize,
    pub seed: u64,
    pub decoder: DecoderKind,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Noise/τ draws per sample for the flow loss.
    pub flow_samples: usize,
    /// Freeze embeddings and the lower blocks.
    pub freeze_lower: bool,
    pub eval_interval: usize,
    pub eval_trials: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    /// Defaults for training the toy models from scratch.
    pub fn toy() -> Self {
        Self {
            lr: 3e-4,
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 1e-4,
            warmup_iters: 200,
            total_iters: 20_000,
            batch: 16,
            seed: 0,
            decoder: DecoderKind::Flow,
            grad_clip: Some(1.0),
            flow_samples: 16,
            freeze_lower: false,
            eval_interval: 2000,
            eval_trials: 20,
        }
    }

    /// Fine-tuning hyperparameters of large pretrained policies.
    pub fn paper() -> Self {
        Self { lr: 2.5e-5, betas: (0.9, 0.95), weight_decay: 1e-10, warmup_iters: 1000, batch: 32, ..Self::toy() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::Config(format!("unknown preset '{name}' (toy | paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_iters > self.total_iters {
            return Err(Error::Config(format!(
                "warmup_iters {} exceeds total_iters {}",
                self.warmup_iters, self.total_iters
            )));
        }
        if self.batch == 0 || self.flow_samples == 0 {
            return Err(Error::Config("batch and flow_samples must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return Err(Error::Config("lr must be >= 0 and betas in [0, 1)".into()));
        }
        Ok(())
    }

    /// Applies `key=value` overrides (the same keys as [`to_kv`](Self::to_kv)).
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
        }
        match key {
            "lr" => self.lr = p(key, value)?,
            "beta1" => self.betas.0 = p(key, value)?,
            "beta2" => self.betas.1 = p(key, value)?,
            "eps" => self.eps = p(key, value)?,
            "weight_decay" => self.weight_decay = p(key, value)?,
            "warmup_iters" => self.warmup_iters = p(key, value)?,
            "total_iters" | "iters" => self.total_iters = p(key, value)?,
            "batch" => self.batch = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "decoder" => self.decoder = value.parse()?,
            "grad_clip" => self.grad_clip = if value == "none" { None } else { Some(p(key, value)?) },
            "flow_samples" => self.flow_samples = p(key, value)?,
            "freeze_lower" => self.freeze_lower = p(key, value)?,
            "eval_interval" => self.eval_interval = p(key, value)?,
            "eval_trials" => self.eval_trials = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> String {
        let clip = self.grad_clip.map_or("none".to_string(), |c| c.to_string());
        [
            ("lr", self.lr.to_string()),
            ("beta1", self.betas.0.to_string()),
            ("beta2", self.betas.1.to_string()),
            ("eps", self.eps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("warmup_iters", self.warmup_iters.to_string()),
            ("total_iters", self.total_iters.to_string()),
            ("batch", self.batch.to_string()),
            ("seed", self.seed.to_string()),
            ("decoder", self.decoder.to_string()),
            ("grad_clip", clip),
            ("flow_samples", self.flow_samples.to_string()),
            ("freeze_lower", self.freeze_lower.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("eval_trials", self.eval_trials.to_string()),
        ]
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
    }
}

/// Linear warmup from 0 to `lr`, then cosine decay to 0 at `total_iters`.
pub fn lr_schedule(iter: usize, cfg: &TrainConfig) -> f64 {
    let (w, total) = (cfg.warmup_iters, cfg.total_iters);
    if iter < w {
        return cfg.lr * iter as f64 / w as f64;
    }
    if total <= w {
        return cfg.lr;
    }
    let progress = ((iter - w) as f64 / (total - w) as f64).min(1.0);
    cfg.lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// First and second moment estimates.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor2>,
    pub v: Vec<Tensor2>,
    /// Applied updates (bias-correction exponent).
    pub steps: u64,
    /// Updates skipped because of non-finite gradients.
    pub skipped: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor2]) -> Self {
        let z: Vec<Tensor2> = params.iter().map(|p| Tensor2::zeros(p.rows(), p.cols())).collect();
        Self { m: z.clone(), v: z, steps: 0, skipped: 0 }
    }
}

pub fn grad_norm(grads: &[Tensor2]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// One AdamW update at learning rate `lr_schedule(iter)`: bias-corrected
/// moments, weight decay applied directly to the parameters. Returns
/// `false` (and counts a skip) when a gradient is non-finite.
pub fn adamw_step(
    params: &mut [Tensor2],
    grads: &[Tensor2],
    state: &mut AdamState,
    cfg: &TrainConfig,
    iter: usize,
) -> Result<bool> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return shape_err(format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return shape_err(format!("param {:?} vs grad {:?}", p.shape(), g.shape()));
        }
    }
    if grads.iter().any(|g| !g.is_finite()) {
        state.skipped += 1;
        return Ok(false);
    }
    let lr = lr_schedule(iter, cfg);
    let (b1, b2) = cfg.betas;
    state.steps += 1;
    let c1 = 1.0 - b1.powi(state.steps as i32);
    let c2 = 1.0 - b2.powi(state.steps as i32);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let (pd, gd) = (p.data_mut(), g.data());
        for (i, (&gi, pi)) in gd.iter().zip(pd.iter_mut()).enumerate() {
            let mi = &mut m.data_mut()[i];
            *mi = b1 * *mi + (1.0 - b1) * gi;
            let vi = &mut v.data_mut()[i];
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let update = (m.data()[i] / c1) / ((v.data()[i] / c2).sqrt() + cfg.eps);
            *pi -= lr * (update + cfg.weight_decay * *pi);
        }
    }
    Ok(true)
}
