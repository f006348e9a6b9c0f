//! Trunk forward pass: patch embedding, frame-causal lower blocks, history
//! pooling into one context token, and the upper blocks on the reduced
//! sequence.
//!
//! The `*_on` functions record onto a caller-owned [`Tape`] so the same code
//! serves training, the uncached oracle and the cached streaming path.

use crate::error::{shape_err, Error, Result};
use crate::numerics::{AttnMask, Tape, Tensor2, Var};
use crate::obs::{Instruction, Observation};

use super::config::ModelConfig;
use super::mask::Layout;
use super::weights::{BlockIds, Weights};

/// Activations of one sequence after `block` transformer blocks.
#[derive(Clone, Debug)]
pub struct HiddenStates {
    pub block: usize,
    pub layout: Layout,
    pub acts: Tensor2,
}

impl HiddenStates {
    pub fn new(block: usize, layout: Layout, acts: Tensor2) -> Result<Self> {
        if acts.rows() != layout.total_rows() {
            return shape_err(format!("{} activation rows for a layout of {}", acts.rows(), layout.total_rows()));
        }
        Ok(Self { block, layout, acts })
    }
}

/// The pooled history vector (1×d).
#[derive(Clone, Debug, PartialEq)]
pub struct ContextToken(pub Tensor2);

/// Non-overlapping patches of every view, one `P × patch_dim` matrix per view,
/// intensities scaled to `[0, 1]`.
pub fn patchify(obs: &Observation, cfg: &ModelConfig) -> Result<Vec<Tensor2>> {
    obs.check_shape(cfg.views, cfg.image_height, cfg.image_width, cfg.image_channels)?;
    let ps = cfg.patch_size;
    let (gh, gw) = (cfg.image_height / ps, cfg.image_width / ps);
    let c = cfg.image_channels;
    let mut out = Vec::with_capacity(cfg.views);
    for img in &obs.views {
        let mut t = Tensor2::zeros(gh * gw, cfg.patch_dim());
        for py in 0..gh {
            for px in 0..gw {
                let row = t.row_mut(py * gw + px);
                let mut i = 0;
                for y in 0..ps {
                    let base = ((py * ps + y) * cfg.image_width + px * ps) * c;
                    for v in &img.data[base..base + ps * c] {
                        row[i] = f64::from(*v) / 255.0;
                        i += 1;
                    }
                }
            }
        }
        out.push(t);
    }
    Ok(out)
}

/// `V·P × d` tokens of one observation.
pub fn embed_frame_on(tape: &mut Tape, w: &Weights, obs: &Observation) -> Result<Var> {
    let l = &w.layout;
    let patches = patchify(obs, &w.cfg)?;
    let pw = tape.param(l.patch_w);
    let pb = tape.param(l.patch_b);
    let pos = tape.param(l.patch_pos);
    let views = tape.param(l.view_emb);
    let mut rows = Vec::with_capacity(patches.len());
    for (v, p) in patches.into_iter().enumerate() {
        let x = tape.constant(p);
        let e = tape.linear(x, pw, Some(pb))?;
        let e = tape.add(e, pos)?;
        let ve = tape.slice_rows(views, v, 1)?;
        rows.push(tape.add_row(e, ve)?);
    }
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        tape.concat_rows(&rows)
    }
}

pub fn embed_instruction_on(tape: &mut Tape, w: &Weights, instr: &Instruction) -> Result<Option<Var>> {
    let cfg = &w.cfg;
    if instr.ids.len() != cfg.instr_len {
        return shape_err(format!("instruction of {} tokens, expected {}", instr.ids.len(), cfg.instr_len));
    }
    if let Some(bad) = instr.ids.iter().find(|&&i| i >= cfg.instr_vocab) {
        return Err(Error::Invalid(format!("instruction id {bad} outside vocab {}", cfg.instr_vocab)));
    }
    if cfg.instr_len == 0 {
        return Ok(None);
    }
    let table = tape.param(w.layout.tok_emb);
    let pos = tape.param(w.layout.instr_pos);
    let e = tape.gather(table, &instr.ids)?;
    Ok(Some(tape.add(e, pos)?))
}

/// Output of one block plus the keys/values it produced for its own rows
/// (rotary positions already applied to keys).
pub struct BlockOut {
    pub out: Var,
    pub k: Var,
    pub v: Var,
}

/// Pre-norm transformer block. `prefix` holds keys/values of earlier rows
/// that are attended to but not recomputed; `mask` spans `prefix + x` keys.
pub fn block_on(
    tape: &mut Tape,
    w: &Weights,
    b: &BlockIds,
    x: Var,
    prefix: Option<(Var, Var)>,
    mask: &AttnMask,
    rope: Option<&[f64]>,
) -> Result<BlockOut> {
    let cfg = &w.cfg;
    let n1 = tape.param(b.norm1);
    let h = tape.rms_norm(x, n1)?;
    let wq = tape.param(b.wq);
    let wk = tape.param(b.wk);
    let wv = tape.param(b.wv);
    let mut q = tape.matmul(h, wq)?;
    let mut k = tape.matmul(h, wk)?;
    let v = tape.matmul(h, wv)?;
    if let Some(pos) = rope {
        q = tape.rope(q, pos, cfg.heads, cfg.rope_base)?;
        k = tape.rope(k, pos, cfg.heads, cfg.rope_base)?;
    }
    let (k_all, v_all) = match prefix {
        Some((pk, pv)) => (tape.concat_rows(&[pk, k])?, tape.concat_rows(&[pv, v])?),
        None => (k, v),
    };
    let a = tape.attention(q, k_all, v_all, Some(mask), cfg.heads)?;
    let wo = tape.param(b.wo);
    let bo = tape.param(b.bo);
    let o = tape.linear(a, wo, Some(bo))?;
    let x = tape.add(x, o)?;
    let n2 = tape.param(b.norm2);
    let h2 = tape.rms_norm(x, n2)?;
    let w1 = tape.param(b.w1);
    let b1 = tape.param(b.b1);
    let w2 = tape.param(b.w2);
    let b2 = tape.param(b.b2);
    let m = tape.linear(h2, w1, Some(b1))?;
    let m = tape.gelu(m);
    let m = tape.linear(m, w2, Some(b2))?;
    let out = tape.add(x, m)?;
    if !tape.value(out).is_finite() {
        return Err(Error::NonFinite("block activations".into()));
    }
    Ok(BlockOut { out, k, v })
}

pub fn rope_positions(layout: &Layout) -> Vec<f64> {
    (0..layout.total_rows()).map(|r| layout.frame_position(r)).collect()
}

/// Embeds `[history..., current | instruction]` in the uncompressed layout.
pub fn embed_sequence_on(
    tape: &mut Tape,
    w: &Weights,
    history: &[Observation],
    current: &Observation,
    instr: &Instruction,
) -> Result<(Var, Layout)> {
    if history.len() > w.cfg.history_len {
        return Err(Error::Invalid(format!(
            "{} history frames for history_len {}",
            history.len(),
            w.cfg.history_len
        )));
    }
    let mut parts = Vec::with_capacity(history.len() + 2);
    for o in history.iter().chain(std::iter::once(current)) {
        parts.push(embed_frame_on(tape, w, o)?);
    }
    if let Some(i) = embed_instruction_on(tape, w, instr)? {
        parts.push(i);
    }
    let x = tape.concat_rows(&parts)?;
    Ok((x, Layout::uncompressed(&w.cfg, history.len())))
}

/// Runs blocks `range` over `x` with the layout's mask (rotary positions
/// only when `rope`).
pub fn run_blocks_on(
    tape: &mut Tape,
    w: &Weights,
    x: Var,
    layout: &Layout,
    range: std::ops::Range<usize>,
    rope: bool,
) -> Result<Var> {
    let mask = layout.mask();
    let pos = rope.then(|| rope_positions(layout));
    let mut h = x;
    for i in range {
        h = block_on(tape, w, &w.layout.blocks[i], h, None, &mask, pos.as_deref())?.out;
    }
    Ok(h)
}

/// Lower blocks `0..n` over the uncompressed sequence.
pub fn forward_lower_on(tape: &mut Tape, w: &Weights, x: Var, layout: &Layout) -> Result<Var> {
    run_blocks_on(tape, w, x, layout, 0..w.cfg.split_block, true)
}

/// Replaces the history rows of block-`n` states with the context token
/// (or drops them when the context token is disabled).
pub fn splice_on(tape: &mut Tape, w: &Weights, h: Var, layout: &Layout) -> Result<(Var, Layout)> {
    let past = layout.past_rows();
    let keep = layout.total_rows() - past;
    let rest = tape.slice_rows(h, past, keep)?;
    let use_ctx = w.cfg.context_token && layout.past_frames > 0;
    let upper = Layout::compressed(&w.cfg, use_ctx).with_actions(layout.actions);
    if !use_ctx {
        return Ok((rest, upper));
    }
    let pooled = tape.slice_rows(h, 0, past)?;
    let m = tape.mean_rows(pooled)?;
    Ok((context_with_rest_on(tape, w, m, rest)?, upper))
}

/// `[m + context_embedding ; rest]`
pub fn context_with_rest_on(tape: &mut Tape, w: &Weights, m: Var, rest: Var) -> Result<Var> {
    let ce = tape.param(w.layout.ctx_emb);
    let m = tape.add(m, ce)?;
    tape.concat_rows(&[m, rest])
}

/// Upper blocks `n..N` on the compressed layout.
pub fn forward_upper_on(tape: &mut Tape, w: &Weights, x: Var, layout: &Layout) -> Result<Var> {
    run_blocks_on(tape, w, x, layout, w.cfg.split_block..w.cfg.num_blocks, false)
}

/// Full compressed forward: returns final-block activations and their layout.
pub fn forward_features_on(
    tape: &mut Tape,
    w: &Weights,
    history: &[Observation],
    current: &Observation,
    instr: &Instruction,
) -> Result<(Var, Layout)> {
    let (x, layout) = embed_sequence_on(tape, w, history, current, instr)?;
    let h = forward_lower_on(tape, w, x, &layout)?;
    let (u, upper) = splice_on(tape, w, h, &layout)?;
    Ok((forward_upper_on(tape, w, u, &upper)?, upper))
}

/// Every block over the full uncompressed sequence (no pooling at all).
pub fn forward_uncompressed_on(
    tape: &mut Tape,
    w: &Weights,
    history: &[Observation],
    current: &Observation,
    instr: &Instruction,
) -> Result<(Var, Layout)> {
    let (x, layout) = embed_sequence_on(tape, w, history, current, instr)?;
    let h = run_blocks_on(tape, w, x, &layout, 0..w.cfg.num_blocks, true)?;
    Ok((h, layout))
}

// ---- value-level API -------------------------------------------------------

pub fn embed_observation(obs: &Observation, w: &Weights) -> Result<Tensor2> {
    let mut tape = Tape::new(&w.params);
    let v = embed_frame_on(&mut tape, w, obs)?;
    Ok(tape.value(v).clone())
}

/// Block-0 states of `[history..., current | instruction]`.
pub fn embed_sequence(
    w: &Weights,
    history: &[Observation],
    current: &Observation,
    instr: &Instruction,
) -> Result<HiddenStates> {
    let mut tape = Tape::new(&w.params);
    let (x, layout) = embed_sequence_on(&mut tape, w, history, current, instr)?;
    HiddenStates::new(0, layout, tape.value(x).clone())
}

pub fn forward_lower(seq: &HiddenStates, w: &Weights) -> Result<HiddenStates> {
    if seq.block != 0 || seq.layout.context {
        return Err(Error::Invalid("forward_lower needs block-0 states in the uncompressed layout".into()));
    }
    let mut tape = Tape::new(&w.params);
    let x = tape.constant(seq.acts.clone());
    let h = forward_lower_on(&mut tape, w, x, &seq.layout)?;
    HiddenStates::new(w.cfg.split_block, seq.layout, tape.value(h).clone())
}

/// Mean over every history row (all past frames, views and patches).
pub fn compress_history(h: &HiddenStates) -> Result<ContextToken> {
    if h.layout.context {
        return Err(Error::Invalid("states are already compressed".into()));
    }
    if h.layout.past_frames == 0 {
        return Err(Error::Invalid("no history to compress (k = 0)".into()));
    }
    Ok(ContextToken(h.acts.slice_rows(0, h.layout.past_rows()).mean_rows()))
}

/// Upper blocks on `[context? | current | instruction]`, where `rest` holds
/// the block-`n` current-frame and instruction rows.
pub fn forward_upper(ctx: Option<&ContextToken>, rest: &HiddenStates, w: &Weights) -> Result<HiddenStates> {
    if rest.block != w.cfg.split_block || rest.layout.past_frames != 0 || rest.layout.context {
        return Err(Error::Invalid("forward_upper needs block-n current and instruction rows".into()));
    }
    let mut tape = Tape::new(&w.params);
    let r = tape.constant(rest.acts.clone());
    let (x, layout) = match ctx {
        Some(c) => {
            let m = tape.constant(c.0.clone());
            (context_with_rest_on(&mut tape, w, m, r)?, Layout { context: true, ..rest.layout })
        }
        None => (r, rest.layout),
    };
    let out = forward_upper_on(&mut tape, w, x, &layout)?;
    HiddenStates::new(w.cfg.num_blocks, layout, tape.value(out).clone())
}

/// Final-block features of the compressed policy trunk.
pub fn forward_features(
    w: &Weights,
    history: &[Observation],
    current: &Observation,
    instr: &Instruction,
) -> Result<HiddenStates> {
    let mut tape = Tape::new(&w.params);
    let (f, layout) = forward_features_on(&mut tape, w, history, current, instr)?;
    HiddenStates::new(w.cfg.num_blocks, layout, tape.value(f).clone())
}
