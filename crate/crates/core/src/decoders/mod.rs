//! Action heads conditioned on backbone features: flow matching over whole
//! chunks and autoregressive generation of frequency-domain action tokens.

mod ar;
mod chunk;
mod fast;
mod flow;

pub use ar::{action_offset, ar_generate, ar_logits_on, ar_loss, ar_loss_on, ar_sample};
pub use chunk::{ActionChunk, DenoiseState};
pub use fast::{apply_merge, bpe_train, FastTokenizer, Merge, DEFAULT_BASE_VOCAB, DEFAULT_QUANT_SCALE};
pub use flow::{
    flow_head_on, flow_integrate, flow_loss, flow_loss_multi_on, flow_loss_on, flow_noise, flow_sample, pooled_features,
    pooled_features_on, tau_embedding, DEFAULT_FLOW_STEPS,
};

use crate::backbone::{forward_upper_on, DecoderKind, Layout, Weights};
use crate::error::{Error, Result};
use crate::numerics::{AttnStats, Tape, Tensor2};

/// Decoding settings for one action query.
#[derive(Clone, Debug)]
pub enum Decoder {
    Flow { steps: usize, seed: u64 },
    Autoregressive { tokenizer: FastTokenizer, max_len: usize },
}

impl Decoder {
    pub fn kind(&self) -> DecoderKind {
        match self {
            Decoder::Flow { .. } => DecoderKind::Flow,
            Decoder::Autoregressive { .. } => DecoderKind::Autoregressive,
        }
    }

    /// Same decoder with a different noise seed (no-op for greedy decoding).
    pub fn with_seed(&self, seed: u64) -> Self {
        match self {
            Decoder::Flow { steps, .. } => Decoder::Flow { steps: *steps, seed },
            other => other.clone(),
        }
    }
}

/// Runs the upper blocks and the decoder from block-`n` states in the
/// compressed layout.
pub fn decode_actions(w: &Weights, upper_in: &Tensor2, layout: &Layout, dec: &Decoder) -> Result<ActionChunk> {
    Ok(decode_actions_counted(w, upper_in, layout, dec)?.0)
}

/// [`decode_actions`] plus the attention work it performed.
pub fn decode_actions_counted(
    w: &Weights,
    upper_in: &Tensor2,
    layout: &Layout,
    dec: &Decoder,
) -> Result<(ActionChunk, AttnStats)> {
    let mut stats = AttnStats::default();
    if dec.kind() != w.cfg.decoder {
        return Err(Error::Config(format!("decoder {} does not match weights ({})", dec.kind(), w.cfg.decoder)));
    }
    let chunk = match dec {
        Decoder::Flow { steps, seed } => {
            let mut tape = Tape::new(&w.params);
            let x = tape.constant(upper_in.clone());
            let h = forward_upper_on(&mut tape, w, x, layout)?;
            let f = pooled_features_on(&mut tape, w, h)?;
            stats.merge(&tape.stats);
            flow_sample(tape.value(f), w, *steps, *seed)?
        }
        Decoder::Autoregressive { tokenizer, max_len } => {
            ar::ar_generate_counted(w, upper_in, layout, tokenizer, *max_len, &mut stats)?.1
        }
    };
    chunk.values.ensure_finite("decoded actions")?;
    Ok((chunk, stats))
}
