use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamId, Tensor2};

use super::config::{DecoderKind, ModelConfig};

#[derive(Clone, Debug)]
pub struct BlockIds {
    pub norm1: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub norm2: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl BlockIds {
    pub fn ids(&self) -> [ParamId; 11] {
        [self.norm1, self.wq, self.wk, self.wv, self.wo, self.bo, self.norm2, self.w1, self.b1, self.w2, self.b2]
    }
}

#[derive(Clone, Debug)]
pub struct FlowIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct ArIds {
    pub action_pos: ParamId,
    pub lm_head: ParamId,
}

/// Handles of every parameter tensor, derived from the config alone.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub patch_pos: ParamId,
    pub view_emb: ParamId,
    pub tok_emb: ParamId,
    pub instr_pos: ParamId,
    pub ctx_emb: ParamId,
    pub blocks: Vec<BlockIds>,
    pub final_norm: ParamId,
    pub flow: Option<FlowIds>,
    pub ar: Option<ArIds>,
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

struct Builder {
    specs: Vec<(String, usize, usize, Init)>,
}

impl Builder {
    fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> ParamId {
        self.specs.push((name.into(), rows, cols, init));
        ParamId(self.specs.len() - 1)
    }
}

fn plan(cfg: &ModelConfig) -> (ParamLayout, Builder) {
    let d = cfg.hidden_dim;
    let mlp = d * cfg.mlp_ratio;
    let fan = |n: usize| Init::Normal(1.0 / (n as f64).sqrt());
    let resid = Init::Normal(1.0 / ((mlp.max(d) as f64).sqrt() * (2.0 * cfg.num_blocks as f64).sqrt()));
    let mut b = Builder { specs: Vec::new() };
    let tok_rows = cfg.instr_vocab + if cfg.decoder == DecoderKind::Autoregressive { cfg.action_vocab } else { 0 };
    let patch_w = b.add("embed.patch_w", cfg.patch_dim(), d, fan(cfg.patch_dim()));
    let patch_b = b.add("embed.patch_b", 1, d, Init::Zeros);
    let patch_pos = b.add("embed.patch_pos", cfg.patch_tokens(), d, Init::Normal(0.1));
    let view_emb = b.add("embed.view", cfg.views, d, Init::Normal(0.1));
    let tok_emb = b.add("embed.tokens", tok_rows, d, Init::Normal(0.1));
    let instr_pos = b.add("embed.instr_pos", cfg.instr_len.max(1), d, Init::Normal(0.1));
    let ctx_emb = b.add("embed.context", 1, d, Init::Normal(0.1));
    let blocks = (0..cfg.num_blocks)
        .map(|i| BlockIds {
            norm1: b.add(format!("block{i}.norm1"), 1, d, Init::Ones),
            wq: b.add(format!("block{i}.wq"), d, d, fan(d)),
            wk: b.add(format!("block{i}.wk"), d, d, fan(d)),
            wv: b.add(format!("block{i}.wv"), d, d, fan(d)),
            wo: b.add(format!("block{i}.wo"), d, d, Init::Normal(1.0 / (d as f64 * 2.0 * cfg.num_blocks as f64).sqrt())),
            bo: b.add(format!("block{i}.bo"), 1, d, Init::Zeros),
            norm2: b.add(format!("block{i}.norm2"), 1, d, Init::Ones),
            w1: b.add(format!("block{i}.w1"), d, mlp, fan(d)),
            b1: b.add(format!("block{i}.b1"), 1, mlp, Init::Zeros),
            w2: b.add(format!("block{i}.w2"), mlp, d, resid),
            b2: b.add(format!("block{i}.b2"), 1, d, Init::Zeros),
        })
        .collect();
    let final_norm = b.add("final_norm", 1, d, Init::Ones);
    let chunk = cfg.chunk_size() * cfg.action_dim;
    let flow = (cfg.decoder == DecoderKind::Flow).then(|| {
        let fin = d + chunk + cfg.tau_dim;
        FlowIds {
            w1: b.add("flow.w1", fin, cfg.flow_hidden, fan(fin)),
            b1: b.add("flow.b1", 1, cfg.flow_hidden, Init::Zeros),
            w2: b.add("flow.w2", cfg.flow_hidden, chunk, fan(cfg.flow_hidden)),
            b2: b.add("flow.b2", 1, chunk, Init::Zeros),
        }
    });
    let ar = (cfg.decoder == DecoderKind::Autoregressive).then(|| ArIds {
        action_pos: b.add("ar.action_pos", cfg.max_action_tokens, d, Init::Normal(0.1)),
        lm_head: b.add("ar.lm_head", d, cfg.action_vocab, fan(d)),
    });
    let layout = ParamLayout {
        patch_w,
        patch_b,
        patch_pos,
        view_emb,
        tok_emb,
        instr_pos,
        ctx_emb,
        blocks,
        final_norm,
        flow,
        ar,
    };
    (layout, b)
}

/// Model parameters plus the config that shaped them.
#[derive(Clone, Debug)]
pub struct Weights {
    pub cfg: ModelConfig,
    pub layout: ParamLayout,
    pub params: Vec<Tensor2>,
    pub names: Vec<String>,
}

impl Weights {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (layout, b) = plan(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(b.specs.len());
        let mut names = Vec::with_capacity(b.specs.len());
        for (name, r, c, init) in b.specs {
            params.push(match init {
                Init::Zeros => Tensor2::zeros(r, c),
                Init::Ones => Tensor2::filled(r, c, 1.0),
                Init::Normal(std) => Tensor2::randn(r, c, std, &mut rng),
            });
            names.push(name);
        }
        Ok(Self { cfg: cfg.clone(), layout, params, names })
    }

    /// Builds weights from named tensors; every expected name must be present
    /// with the expected shape.
    pub fn from_named(cfg: &ModelConfig, mut named: HashMap<String, Tensor2>) -> Result<Self> {
        let mut w = Self::init(cfg, 0)?;
        for (name, slot) in w.names.iter().zip(w.params.iter_mut()) {
            let t = named
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor '{name}'")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::Format(format!("unexpected tensor '{extra}'")));
        }
        Ok(w)
    }

    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data().len()).sum()
    }

    /// Ids of parameters outside the action heads (the trunk).
    pub fn backbone_ids(&self) -> Vec<ParamId> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| !(n.starts_with("flow.") || n.starts_with("ar.")))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Zeroes every weight and bias of the transformer blocks (norm gains kept).
    pub fn zero_blocks(&mut self) {
        let ids: Vec<ParamId> = self
            .layout
            .blocks
            .iter()
            .flat_map(|b| [b.wq, b.wk, b.wv, b.wo, b.bo, b.w1, b.b1, b.w2, b.b2])
            .collect();
        for id in ids {
            let t = self.get_mut(id);
            *t = Tensor2::zeros(t.rows(), t.cols());
        }
    }
}
