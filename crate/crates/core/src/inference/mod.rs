//! Streaming action generation: a per-episode KV cache over the lower blocks
//! with an incrementally pooled context token, an uncached reference path,
//! and a latency/attention-cost benchmark.

mod bench;
mod cache;

pub use bench::{bench, bench_csv, BenchMode, BenchRow, BENCH_CSV_HEADER};
pub use cache::{act, act_counted, append_frame, StreamCache};

use crate::backbone::{embed_sequence_on, forward_lower_on, splice_on, Weights};
use crate::decoders::{decode_actions_counted, ActionChunk, Decoder};
use crate::error::Result;
use crate::numerics::{AttnStats, Tape};
use crate::obs::{Instruction, Observation};

/// Uncached reference: lower blocks over every frame, pooling, upper blocks
/// and decoder, recomputed from scratch.
pub fn oracle_act(
    history: &[Observation],
    current: &Observation,
    instr: &Instruction,
    dec: &Decoder,
    w: &Weights,
) -> Result<ActionChunk> {
    Ok(oracle_act_counted(history, current, instr, dec, w)?.0)
}

pub fn oracle_act_counted(
    history: &[Observation],
    current: &Observation,
    instr: &Instruction,
    dec: &Decoder,
    w: &Weights,
) -> Result<(ActionChunk, AttnStats)> {
    let mut tape = Tape::new(&w.params);
    let (x, layout) = embed_sequence_on(&mut tape, w, history, current, instr)?;
    let h = forward_lower_on(&mut tape, w, x, &layout)?;
    let (u, upper) = splice_on(&mut tape, w, h, &layout)?;
    let mut stats = tape.stats;
    let (chunk, s) = decode_actions_counted(w, tape.value(u), &upper, dec)?;
    stats.merge(&s);
    Ok((chunk, stats))
}

/// Every block over the full multi-frame sequence, with no pooling.
pub fn uncompressed_act_counted(
    history: &[Observation],
    current: &Observation,
    instr: &Instruction,
    dec: &Decoder,
    w: &Weights,
) -> Result<(ActionChunk, AttnStats)> {
    let mut tape = Tape::new(&w.params);
    let (x, layout) = embed_sequence_on(&mut tape, w, history, current, instr)?;
    let h = forward_lower_on(&mut tape, w, x, &layout)?;
    let mut stats = tape.stats;
    let (chunk, s) = decode_actions_counted(w, tape.value(h), &layout, dec)?;
    stats.merge(&s);
    Ok((chunk, stats))
}

/// Closed-loop driver for one episode: pads the history with the first
/// frame, acts on each observation, then appends it to the cache.
#[derive(Clone, Debug)]
pub struct StreamingPolicy<'w> {
    weights: &'w Weights,
    decoder: Decoder,
    cache: StreamCache,
    step: u64,
}

impl<'w> StreamingPolicy<'w> {
    pub fn new(weights: &'w Weights, decoder: Decoder) -> Self {
        Self { weights, cache: StreamCache::new(weights), decoder, step: 0 }
    }

    pub fn cache(&self) -> &StreamCache {
        &self.cache
    }

    fn prime(&mut self, obs: &Observation) -> Result<()> {
        let w = self.weights;
        if self.step == 0 {
            for _ in 0..w.cfg.history_len {
                self.push(obs)?;
            }
        }
        Ok(())
    }

    fn push(&mut self, obs: &Observation) -> Result<()> {
        let w = self.weights;
        self.cache = append_frame(std::mem::replace(&mut self.cache, StreamCache::new(w)), obs, w)?;
        Ok(())
    }

    /// Chunk for `obs`, which then joins the history. Flow noise is reseeded
    /// per step from the base seed.
    pub fn step(&mut self, obs: &Observation, instr: &Instruction) -> Result<ActionChunk> {
        self.prime(obs)?;
        let dec = match &self.decoder {
            Decoder::Flow { seed, .. } => self.decoder.with_seed(seed.wrapping_add(self.step)),
            other => other.clone(),
        };
        let chunk = act(&self.cache, obs, instr, &dec, self.weights)?;
        self.push(obs)?;
        self.step += 1;
        Ok(chunk)
    }

    /// Adds `obs` to the history without choosing an action.
    pub fn observe(&mut self, obs: &Observation) -> Result<()> {
        self.prime(obs)?;
        self.push(obs)?;
        self.step += 1;
        Ok(())
    }
}
