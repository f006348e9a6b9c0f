//! Autoregressive action head: action tokens are appended after the
//! instruction in the upper-block sequence and predicted one at a time by
//! the same blocks, with a linear readout over the action vocabulary.

use crate::backbone::{block_on, run_blocks_on, Layout, Weights};
use crate::error::{Error, Result};
use crate::numerics::{AttnMask, AttnStats, Tape, Tensor2, Var};

use super::chunk::ActionChunk;
use super::fast::FastTokenizer;

/// First model-vocabulary id reserved for action tokens.
pub fn action_offset(w: &Weights) -> usize {
    w.cfg.instr_vocab
}

fn ar_ids(w: &Weights) -> Result<&crate::backbone::ArIds> {
    w.layout
        .ar
        .as_ref()
        .ok_or_else(|| Error::Config("weights have no autoregressive head".into()))
}

fn to_local(w: &Weights, ids: &[usize]) -> Result<Vec<usize>> {
    let off = action_offset(w);
    ids.iter()
        .map(|&id| {
            if id < off || id - off >= w.cfg.action_vocab {
                Err(Error::Invalid(format!("action id {id} outside [{off}, {})", off + w.cfg.action_vocab)))
            } else {
                Ok(id - off)
            }
        })
        .collect()
}

fn action_embeddings_on(tape: &mut Tape, w: &Weights, ids: &[usize], first_pos: usize) -> Result<Var> {
    let ar = ar_ids(w)?;
    if first_pos + ids.len() > w.cfg.max_action_tokens {
        return Err(Error::Invalid(format!(
            "{} action tokens exceed max_action_tokens {}",
            first_pos + ids.len(),
            w.cfg.max_action_tokens
        )));
    }
    let table = tape.param(w.layout.tok_emb);
    let pos = tape.param(ar.action_pos);
    let e = tape.gather(table, ids)?;
    let p = tape.slice_rows(pos, first_pos, ids.len())?;
    tape.add(e, p)
}

fn readout_on(tape: &mut Tape, w: &Weights, h: Var) -> Result<Var> {
    let g = tape.param(w.layout.final_norm);
    let n = tape.rms_norm(h, g)?;
    let head = tape.param(ar_ids(w)?.lm_head);
    tape.matmul(n, head)
}

/// Teacher-forced logits: row `j` predicts action token `j` from the prefix
/// and `inputs[..j]`. `x` holds block-`n` states in the compressed layout.
pub fn ar_logits_on(tape: &mut Tape, w: &Weights, x: Var, layout: &Layout, inputs: &[usize]) -> Result<Var> {
    if layout.actions != 0 || layout.past_frames != 0 {
        return Err(Error::Invalid("ar head expects a compressed prefix without actions".into()));
    }
    let local = to_local(w, inputs)?;
    let (seq, full) = if local.is_empty() {
        (x, *layout)
    } else {
        let ids: Vec<usize> = local.iter().map(|t| t + action_offset(w)).collect();
        let e = action_embeddings_on(tape, w, &ids, 0)?;
        (tape.concat_rows(&[x, e])?, layout.with_actions(ids.len()))
    };
    let h = run_blocks_on(tape, w, seq, &full, w.cfg.split_block..w.cfg.num_blocks, false)?;
    let rows = tape.slice_rows(h, full.prefix_rows() - 1, local.len() + 1)?;
    readout_on(tape, w, rows)
}

/// Mean next-token cross-entropy over the target ids.
pub fn ar_loss_on(tape: &mut Tape, w: &Weights, x: Var, layout: &Layout, targets: &[usize]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Invalid("empty target sequence".into()));
    }
    let local = to_local(w, targets)?;
    let logits = ar_logits_on(tape, w, x, layout, &targets[..targets.len() - 1])?;
    let loss = tape.cross_entropy(logits, &local)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::NonFinite("ar loss".into()));
    }
    Ok(loss)
}

pub fn ar_loss(features: &Tensor2, layout: &Layout, targets: &[usize], w: &Weights) -> Result<f64> {
    let mut tape = Tape::new(&w.params);
    let x = tape.constant(features.clone());
    let l = ar_loss_on(&mut tape, w, x, layout, targets)?;
    Ok(tape.scalar(l))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding until the tokens expand to a full chunk's worth of
/// coefficients. Upper-block keys/values are cached across steps, so each
/// new token costs one row per block.
///
/// Returns the generated model ids and the decoded chunk.
pub fn ar_generate(
    w: &Weights,
    features: &Tensor2,
    layout: &Layout,
    tok: &FastTokenizer,
    max_len: usize,
) -> Result<(Vec<usize>, ActionChunk)> {
    ar_generate_counted(w, features, layout, tok, max_len, &mut AttnStats::default())
}

pub(crate) fn ar_generate_counted(
    w: &Weights,
    features: &Tensor2,
    layout: &Layout,
    tok: &FastTokenizer,
    max_len: usize,
    stats: &mut AttnStats,
) -> Result<(Vec<usize>, ActionChunk)> {
    let cfg = &w.cfg;
    if tok.special_offset != action_offset(w) || tok.vocab_size() > cfg.action_vocab {
        return Err(Error::Tokenizer(format!(
            "tokenizer (offset {}, vocab {}) does not fit the model (offset {}, vocab {})",
            tok.special_offset,
            tok.vocab_size(),
            action_offset(w),
            cfg.action_vocab
        )));
    }
    let want = cfg.chunk_size() * cfg.action_dim;
    let lens = tok.expansion_lengths();
    let max_len = max_len.min(cfg.max_action_tokens + 1);
    let upper = &w.layout.blocks[cfg.split_block..];

    let mut tape = Tape::new(&w.params);
    let mut h = tape.constant(features.clone());
    let mask = layout.mask();
    let mut kv: Vec<(Tensor2, Tensor2)> = Vec::with_capacity(upper.len());
    for b in upper {
        let o = block_on(&mut tape, w, b, h, None, &mask, None)?;
        kv.push((tape.value(o.k).clone(), tape.value(o.v).clone()));
        h = o.out;
    }
    let last = tape.slice_rows(h, layout.prefix_rows() - 1, 1)?;
    let logits = readout_on(&mut tape, w, last)?;
    let mut next = argmax(&tape.value(logits).data()[..tok.vocab_size()]);
    stats.merge(&tape.stats);

    let mut ids = Vec::new();
    let mut count = 0;
    loop {
        ids.push(next + action_offset(w));
        count += lens[next];
        if count == want {
            break;
        }
        if count > want {
            return Err(Error::Decode(format!("generated {count} coefficients, expected {want}")));
        }
        if ids.len() >= max_len {
            return Err(Error::Decode(format!("max_len {max_len} reached after {count} of {want} coefficients")));
        }
        let mut tape = Tape::new(&w.params);
        let mut x = action_embeddings_on(&mut tape, w, &ids[ids.len() - 1..], ids.len() - 1)?;
        for (b, (k, v)) in upper.iter().zip(kv.iter_mut()) {
            let pk = tape.constant(k.clone());
            let pv = tape.constant(v.clone());
            let m = AttnMask::full(1, k.rows() + 1);
            let o = block_on(&mut tape, w, b, x, Some((pk, pv)), &m, None)?;
            *k = Tensor2::concat_rows(&[k, tape.value(o.k)])?;
            *v = Tensor2::concat_rows(&[v, tape.value(o.v)])?;
            x = o.out;
        }
        let logits = readout_on(&mut tape, w, x)?;
        next = argmax(&tape.value(logits).data()[..tok.vocab_size()]);
        stats.merge(&tape.stats);
    }
    let chunk = tok.decode(&ids, cfg.chunk_size(), cfg.action_dim)?;
    Ok((ids, chunk))
}

/// Greedy decoding; the seed is accepted for interface symmetry and unused.
pub fn ar_sample(
    w: &Weights,
    features: &Tensor2,
    layout: &Layout,
    tok: &FastTokenizer,
    max_len: usize,
    _seed: u64,
) -> Result<ActionChunk> {
    Ok(ar_generate(w, features, layout, tok, max_len)?.1)
}
