#![allow(dead_code)]

use ctxp_core::backbone::{ModelConfig, Weights};
use ctxp_core::numerics::{grad_check, ParamId, Tape, Tensor2, Var};
use ctxp_core::obs::{Image, Instruction, Observation};
use rand::Rng;

pub fn random_obs<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Observation {
    Observation {
        views: (0..cfg.views)
            .map(|_| {
                let n = cfg.image_height * cfg.image_width * cfg.image_channels;
                Image::from_data(
                    cfg.image_height,
                    cfg.image_width,
                    cfg.image_channels,
                    (0..n).map(|_| rng.gen()).collect(),
                )
                .unwrap()
            })
            .collect(),
    }
}

pub fn random_instr<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Instruction {
    Instruction::new((0..cfg.instr_len).map(|_| rng.gen_range(0..cfg.instr_vocab)).collect())
}

/// Tiny config for oracle comparisons and gradient checks.
pub fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        history_len: 2,
        chunk_len: 3,
        num_blocks: 2,
        split_block: 1,
        image_height: 8,
        image_width: 8,
        patch_size: 4,
        hidden_dim: 8,
        heads: 2,
        mlp_ratio: 2,
        instr_len: 2,
        instr_vocab: 5,
        action_dim: 2,
        flow_hidden: 8,
        tau_dim: 4,
        action_vocab: 12,
        max_action_tokens: 10,
        ..ModelConfig::default()
    }
}

/// Relative gradient error of `build`'s scalar output with respect to one
/// parameter tensor.
pub fn check_param<F>(w: &Weights, id: ParamId, build: F) -> f64
where
    F: Fn(&mut Tape, &Weights) -> ctxp_core::Result<Var>,
{
    let f = |x: &Tensor2| -> ctxp_core::Result<(f64, Tensor2)> {
        let mut w2 = w.clone();
        w2.params[id.0] = x.clone();
        let mut tape = Tape::new(&w2.params);
        let out = build(&mut tape, &w2)?;
        let g = tape.backward(out)?;
        let grad = g.param(id).cloned().unwrap_or_else(|| Tensor2::zeros(x.rows(), x.cols()));
        Ok((tape.scalar(out), grad))
    };
    grad_check(f, &w.params[id.0]).unwrap()
}
