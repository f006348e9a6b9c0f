use std::collections::VecDeque;

use crate::backbone::{block_on, context_with_rest_on, embed_frame_on, embed_instruction_on, Layout, Weights};
use crate::decoders::{decode_actions_counted, ActionChunk, Decoder};
use crate::error::{Error, Result};
use crate::numerics::{AttnMask, AttnStats, Tape, Tensor2, Var};
use crate::obs::{Instruction, Observation};

/// Lower-block state of one retained history frame.
#[derive(Clone, Debug)]
struct CachedFrame {
    obs: Observation,
    /// Per lower block: keys (rotary positions applied) and values.
    kv: Vec<(Tensor2, Tensor2)>,
    /// Sum of the frame's block-`n` rows.
    sum: Vec<f64>,
}

/// Per-episode streaming state: lower-block keys/values of the last `k`
/// frames and a running sum for the context token.
///
/// Keys carry rotary positions equal to each frame's slot in the window, so
/// when the oldest frame is evicted the retained frames are re-encoded from
/// their stored observations; their lower-block states depended on the
/// evicted frame through the causal mask.
#[derive(Clone, Debug)]
pub struct StreamCache {
    frames: VecDeque<CachedFrame>,
    running_sum: Vec<f64>,
    pooled_count: usize,
    last_timestep: Option<u64>,
    window: usize,
    frame_tokens: usize,
}

impl StreamCache {
    pub fn new(w: &Weights) -> Self {
        Self {
            frames: VecDeque::with_capacity(w.cfg.history_len + 1),
            running_sum: vec![0.0; w.cfg.hidden_dim],
            pooled_count: 0,
            last_timestep: None,
            window: w.cfg.history_len,
            frame_tokens: w.cfg.frame_tokens(),
        }
    }

    /// Frames currently held.
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn pooled_count(&self) -> usize {
        self.pooled_count
    }

    pub fn running_sum(&self) -> &[f64] {
        &self.running_sum
    }

    pub fn last_timestep(&self) -> Option<u64> {
        self.last_timestep
    }

    /// Mean of every pooled row, if any frame is held.
    pub fn context_mean(&self) -> Option<Tensor2> {
        (self.pooled_count > 0)
            .then(|| Tensor2::row_vector(&self.running_sum.iter().map(|s| s / self.pooled_count as f64).collect::<Vec<_>>()))
    }

    /// Cached keys and values of lower block `block`, all held frames stacked.
    pub fn block_kv(&self, block: usize) -> Option<(Tensor2, Tensor2)> {
        if self.frames.is_empty() {
            return None;
        }
        let ks: Vec<&Tensor2> = self.frames.iter().map(|f| &f.kv[block].0).collect();
        let vs: Vec<&Tensor2> = self.frames.iter().map(|f| &f.kv[block].1).collect();
        Some((Tensor2::concat_rows(&ks).ok()?, Tensor2::concat_rows(&vs).ok()?))
    }

    /// Held observations, oldest first.
    pub fn observations(&self) -> Vec<Observation> {
        self.frames.iter().map(|f| f.obs.clone()).collect()
    }

    fn recompute_sum(&mut self) {
        self.running_sum.iter_mut().for_each(|s| *s = 0.0);
        for f in &self.frames {
            for (s, v) in self.running_sum.iter_mut().zip(&f.sum) {
                *s += v;
            }
        }
        self.pooled_count = self.frames.len() * self.frame_tokens;
    }
}

fn check_obs(w: &Weights, obs: &Observation) -> Result<()> {
    let c = &w.cfg;
    obs.check_shape(c.views, c.image_height, c.image_width, c.image_channels)
}

/// Runs the lower blocks over `x` (rows at rotary positions `pos`) given
/// cached keys/values of earlier rows. Returns the block-`n` output and the
/// rows' own keys/values per block.
fn lower_with_prefix(
    tape: &mut Tape,
    w: &Weights,
    x: Var,
    prefix: Option<&StreamCache>,
    mask: &AttnMask,
    pos: &[f64],
) -> Result<(Var, Vec<(Var, Var)>)> {
    let mut h = x;
    let mut own = Vec::with_capacity(w.cfg.split_block);
    for (i, b) in w.layout.blocks[..w.cfg.split_block].iter().enumerate() {
        let pre = prefix.and_then(|c| c.block_kv(i)).map(|(k, v)| (tape.constant(k), tape.constant(v)));
        let o = block_on(tape, w, b, h, pre, mask, Some(pos))?;
        own.push((o.k, o.v));
        h = o.out;
    }
    Ok((h, own))
}

fn frame_sum(t: &Tensor2, start: usize, rows: usize) -> Vec<f64> {
    let mut s = vec![0.0; t.cols()];
    for r in start..start + rows {
        for (a, v) in s.iter_mut().zip(t.row(r)) {
            *a += v;
        }
    }
    s
}

/// Encodes `obs` as the newest history frame. When the window is full the
/// oldest frame is evicted and the retained frames are re-encoded.
pub fn append_frame(mut cache: StreamCache, obs: &Observation, w: &Weights) -> Result<StreamCache> {
    check_obs(w, obs)?;
    cache.last_timestep = Some(cache.last_timestep.map_or(0, |t| t + 1));
    if cache.window == 0 {
        return Ok(cache);
    }
    let ft = cache.frame_tokens;
    if cache.frames.len() == cache.window {
        let mut held = cache.observations();
        held.remove(0);
        held.push(obs.clone());
        cache.frames.clear();
        let mut tape = Tape::new(&w.params);
        let parts = held.iter().map(|o| embed_frame_on(&mut tape, w, o)).collect::<Result<Vec<_>>>()?;
        let x = tape.concat_rows(&parts)?;
        let layout = Layout { past_frames: held.len() - 1, instr: 0, ..Layout::uncompressed(&w.cfg, 0) };
        let pos: Vec<f64> = (0..held.len() * ft).map(|r| (r / ft) as f64).collect();
        let (h, own) = lower_with_prefix(&mut tape, w, x, None, &layout.mask(), &pos)?;
        let hv = tape.value(h);
        for (f, o) in held.into_iter().enumerate() {
            let kv = own
                .iter()
                .map(|&(k, v)| (tape.value(k).slice_rows(f * ft, ft), tape.value(v).slice_rows(f * ft, ft)))
                .collect();
            cache.frames.push_back(CachedFrame { obs: o, kv, sum: frame_sum(hv, f * ft, ft) });
        }
    } else {
        let slot = cache.frames.len();
        let mut tape = Tape::new(&w.params);
        let x = embed_frame_on(&mut tape, w, obs)?;
        let mask = AttnMask::full(ft, (slot + 1) * ft);
        let pos = vec![slot as f64; ft];
        let (h, own) = lower_with_prefix(&mut tape, w, x, Some(&cache), &mask, &pos)?;
        let kv = own.iter().map(|&(k, v)| (tape.value(k).clone(), tape.value(v).clone())).collect();
        let sum = frame_sum(tape.value(h), 0, ft);
        cache.frames.push_back(CachedFrame { obs: obs.clone(), kv, sum });
    }
    cache.recompute_sum();
    Ok(cache)
}

/// Chooses a chunk from the current frame, attending to cached history in
/// the lower blocks and to the pooled context token above them. The cache
/// is not modified.
pub fn act(
    cache: &StreamCache,
    current: &Observation,
    instr: &Instruction,
    dec: &Decoder,
    w: &Weights,
) -> Result<ActionChunk> {
    Ok(act_counted(cache, current, instr, dec, w)?.0)
}

/// [`act`] plus the attention work it performed.
pub fn act_counted(
    cache: &StreamCache,
    current: &Observation,
    instr: &Instruction,
    dec: &Decoder,
    w: &Weights,
) -> Result<(ActionChunk, AttnStats)> {
    check_obs(w, current)?;
    if cache.len() > w.cfg.history_len {
        return Err(Error::Invalid("cache holds more than history_len frames".into()));
    }
    let past = cache.len();
    let full = Layout::uncompressed(&w.cfg, past);
    let mut tape = Tape::new(&w.params);
    let f = embed_frame_on(&mut tape, w, current)?;
    let x = match embed_instruction_on(&mut tape, w, instr)? {
        Some(i) => tape.concat_rows(&[f, i])?,
        None => f,
    };
    let rows = full.total_rows() - full.past_rows();
    let mask = full.mask().slice_queries(full.past_rows(), rows);
    let pos = vec![past as f64; rows];
    let (rest, _) = lower_with_prefix(&mut tape, w, x, Some(cache), &mask, &pos)?;
    let (upper_in, layout) = match cache.context_mean().filter(|_| w.cfg.context_token) {
        Some(m) => {
            let mv = tape.constant(m);
            (context_with_rest_on(&mut tape, w, mv, rest)?, Layout::compressed(&w.cfg, true))
        }
        None => (rest, Layout::compressed(&w.cfg, false)),
    };
    let mut stats = tape.stats;
    let (chunk, upper) = decode_actions_counted(w, tape.value(upper_in), &layout, dec)?;
    stats.merge(&upper);
    Ok((chunk, stats))
}
