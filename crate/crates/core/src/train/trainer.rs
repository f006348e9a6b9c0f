use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    embed_sequence_on, forward_lower_on, forward_upper_on, save_checkpoint, splice_on, DecoderKind, ModelConfig,
    Weights,
};
use crate::decoders::{
    ar_loss_on, flow_loss_multi_on, pooled_features_on, ActionChunk, Decoder, FastTokenizer, DEFAULT_BASE_VOCAB,
    DEFAULT_FLOW_STEPS, DEFAULT_QUANT_SCALE,
};
use crate::envs::{evaluate_policy, Dataset, ModelPolicy, Task};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor2, Var};

use super::data::{action_scale, all_chunks, check_dataset, sample_window, Window};
use super::optim::{adamw_step, grad_norm, lr_schedule, AdamState, TrainConfig};

/// Samples per sequential gradient accumulator; partial sums are combined
/// in index order so results do not depend on the thread count.
const ACCUM_CHUNK: usize = 4;

pub const LOSS_CSV_HEADER: &str = "iter,loss,lr,grad_norm";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub iter: usize,
    pub partial_rate: f64,
    pub full_rate: f64,
}

/// Closed-loop evaluation run during training.
#[derive(Clone, Debug)]
pub struct EvalSpec {
    pub task: Task,
    pub seed: u64,
    pub exec_horizon: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Receives `loss.csv`, periodic checkpoints, `best.ctxp` and `final.ctxp`.
    pub out_dir: Option<PathBuf>,
    pub eval: Option<EvalSpec>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best evaluated weights, or the final ones without evaluation.
    pub weights: Weights,
    pub final_weights: Weights,
    pub tokenizer: Option<FastTokenizer>,
    pub log: Vec<LogRow>,
    pub evals: Vec<EvalRow>,
    pub best_iter: Option<usize>,
    pub skipped_steps: u64,
}

/// Tokenizer file stored next to an autoregressive checkpoint.
pub fn tokenizer_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("tok")
}

/// Inference decoder for trained weights.
pub fn decoder_for(w: &Weights, tokenizer: Option<&FastTokenizer>, seed: u64) -> Result<Decoder> {
    match w.cfg.decoder {
        DecoderKind::Flow => Ok(Decoder::Flow { steps: DEFAULT_FLOW_STEPS, seed }),
        DecoderKind::Autoregressive => {
            let tokenizer =
                tokenizer.cloned().ok_or_else(|| Error::Config("autoregressive weights need a tokenizer".into()))?;
            Ok(Decoder::Autoregressive { tokenizer, max_len: w.cfg.max_action_tokens })
        }
    }
}

/// Quantise-and-merge tokenizer fitted to every target chunk of the dataset.
pub fn fit_tokenizer(ds: &Dataset, cfg: &ModelConfig) -> Result<FastTokenizer> {
    if cfg.action_vocab <= DEFAULT_BASE_VOCAB {
        return Err(Error::Config(format!(
            "action_vocab {} leaves no room for merges over {DEFAULT_BASE_VOCAB} base symbols",
            cfg.action_vocab
        )));
    }
    let mut tok = FastTokenizer::new(DEFAULT_QUANT_SCALE, DEFAULT_BASE_VOCAB, cfg.instr_vocab)?;
    tok.fit(&all_chunks(ds, cfg)?, cfg.action_vocab - DEFAULT_BASE_VOCAB)?;
    Ok(tok)
}

/// Per-sample supervision: noise/τ draws for the flow loss, or the target
/// token ids for the autoregressive loss.
#[derive(Clone, Debug)]
pub enum Target {
    Flow(Vec<(ActionChunk, f64)>),
    Tokens(Vec<usize>),
}

/// Training examples with their supervision, drawn up front so the
/// gradient computation itself is free of randomness.
#[derive(Clone, Debug)]
pub struct Batch(pub Vec<(Window, Target)>);

/// Embeddings and lower blocks, for fine-tuning only the upper part.
pub fn frozen_mask(w: &Weights) -> Vec<bool> {
    let l = &w.layout;
    let mut frozen = vec![false; w.params.len()];
    for id in [l.patch_w, l.patch_b, l.patch_pos, l.view_emb, l.tok_emb, l.instr_pos] {
        frozen[id.0] = true;
    }
    for b in &l.blocks[..w.cfg.split_block] {
        for id in b.ids() {
            frozen[id.0] = true;
        }
    }
    frozen
}

/// Loss of one window; its parameter gradient is added into `acc`.
fn sample_grads(
    w: &Weights,
    frozen: Option<&[bool]>,
    win: &Window,
    target: &Target,
    acc: &mut [Tensor2],
) -> Result<f64> {
    let mut tape = match frozen {
        Some(f) => Tape::with_frozen(&w.params, f),
        None => Tape::new(&w.params),
    };
    let loss = window_loss_on(&mut tape, w, win, target)?;
    tape.backward(loss)?.add_params_into(acc)?;
    Ok(tape.scalar(loss))
}

fn accumulate(into: &mut [Tensor2], from: &[Tensor2]) {
    for (a, b) in into.iter_mut().zip(from) {
        a.add_assign(b);
    }
}

/// Mean loss and mean gradient over a batch.
pub fn batch_loss_grads(w: &Weights, frozen: Option<&[bool]>, batch: &Batch) -> Result<(f64, Vec<Tensor2>)> {
    let batch = &batch.0;
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let partials = batch
        .par_chunks(ACCUM_CHUNK)
        .map(|chunk| {
            let mut loss = 0.0;
            let mut acc: Vec<Tensor2> = w.params.iter().map(|p| Tensor2::zeros(p.rows(), p.cols())).collect();
            for (win, target) in chunk {
                loss += sample_grads(w, frozen, win, target, &mut acc)?;
            }
            Ok((loss, acc))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = partials.into_iter();
    let (mut loss, mut grads) = iter.next().expect("batch is non-empty");
    for (l, g) in iter {
        loss += l;
        accumulate(&mut grads, &g);
    }
    let n = batch.len() as f64;
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok((loss / n, grads))
}

/// Mean loss over a batch without gradients.
pub fn batch_loss(w: &Weights, batch: &Batch) -> Result<f64> {
    Ok(batch_loss_grads(w, None, batch)?.0)
}

/// Loss of one window as a tape expression, for gradient checks.
pub fn window_loss_on(tape: &mut Tape, w: &Weights, win: &Window, target: &Target) -> Result<Var> {
    let (x, layout) = embed_sequence_on(tape, w, &win.history, &win.current, &win.instr)?;
    let h = forward_lower_on(tape, w, x, &layout)?;
    let (u, upper) = splice_on(tape, w, h, &layout)?;
    match target {
        Target::Flow(draws) => {
            let f = forward_upper_on(tape, w, u, &upper)?;
            let feat = pooled_features_on(tape, w, f)?;
            flow_loss_multi_on(tape, w, feat, &win.target, draws)
        }
        Target::Tokens(ids) => ar_loss_on(tape, w, u, &upper, ids),
    }
}

/// Draws `tcfg.batch` windows and their supervision.
pub fn draw_batch<R: Rng>(
    ds: &Dataset,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    tok: Option<&FastTokenizer>,
    rng: &mut R,
) -> Result<Batch> {
    let items = (0..tcfg.batch)
        .map(|_| {
            let win = sample_window(ds, cfg, rng)?;
            let target = draw_target(&win, tcfg, tok, cfg.max_action_tokens, rng)?;
            Ok((win, target))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch(items))
}

/// One optimizer update on `batch`: gradient, optional clipping, AdamW.
/// Returns the log row (loss and gradient norm before the update).
pub fn train_step(
    w: &mut Weights,
    frozen: Option<&[bool]>,
    batch: &Batch,
    adam: &mut AdamState,
    tcfg: &TrainConfig,
    iter: usize,
) -> Result<LogRow> {
    let (loss, mut grads) = batch_loss_grads(w, frozen, batch)?;
    let norm = grad_norm(&grads);
    if let Some(clip) = tcfg.grad_clip {
        if norm > clip && norm.is_finite() {
            let s = clip / norm;
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
        }
    }
    adamw_step(&mut w.params, &grads, adam, tcfg, iter)?;
    Ok(LogRow { iter, loss, lr: lr_schedule(iter, tcfg), grad_norm: norm })
}

fn draw_target<R: Rng>(
    win: &Window,
    tcfg: &TrainConfig,
    tok: Option<&FastTokenizer>,
    max_tokens: usize,
    rng: &mut R,
) -> Result<Target> {
    match tok {
        None => {
            let (rows, cols) = win.target.values.shape();
            let draws = (0..tcfg.flow_samples)
                .map(|_| {
                    let eps = Tensor2::randn(rows, cols, 1.0, rng);
                    Ok((ActionChunk::new(eps)?, rng.gen_range(0.0..1.0)))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Target::Flow(draws))
        }
        Some(tok) => {
            let ids = tok.encode(&win.target)?;
            if ids.len() > max_tokens {
                return Err(Error::Tokenizer(format!(
                    "chunk encodes to {} tokens, max_action_tokens is {max_tokens}",
                    ids.len()
                )));
            }
            Ok(Target::Tokens(ids))
        }
    }
}

fn save_weights(w: &Weights, tok: Option<&FastTokenizer>, path: &Path) -> Result<()> {
    save_checkpoint(w, path)?;
    if let Some(t) = tok {
        t.save(&tokenizer_path(path))?;
    }
    Ok(())
}

/// Behaviour cloning on demonstration windows with AdamW. The decoder of
/// `tcfg` overrides the one in `model_cfg`; an empty action scale is filled
/// in from the dataset. Deterministic for a given
/// dataset, configs and seed.
pub fn train_bc(ds: &Dataset, model_cfg: &ModelConfig, tcfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    tcfg.validate()?;
    let mut cfg = model_cfg.clone();
    cfg.decoder = tcfg.decoder;
    check_dataset(ds, &cfg)?;
    if cfg.action_scale.is_empty() {
        cfg.action_scale = action_scale(ds);
    }
    cfg.validate()?;

    let mut w = Weights::init(&cfg, tcfg.seed)?;
    let tokenizer = match cfg.decoder {
        DecoderKind::Flow => None,
        DecoderKind::Autoregressive => Some(fit_tokenizer(ds, &cfg)?),
    };
    let frozen = tcfg.freeze_lower.then(|| frozen_mask(&w));
    let mut adam = AdamState::new(&w.params);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x7a11_0000);

    let mut csv = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = BufWriter::new(File::create(dir.join("loss.csv"))?);
            writeln!(f, "{LOSS_CSV_HEADER}")?;
            Some(f)
        }
        None => None,
    };

    let mut log = Vec::with_capacity(tcfg.total_iters);
    let mut evals = Vec::new();
    let mut best: Option<(EvalRow, Weights)> = None;

    for iter in 0..tcfg.total_iters {
        let batch = draw_batch(ds, &cfg, tcfg, tokenizer.as_ref(), &mut rng)?;
        let row = train_step(&mut w, frozen.as_deref(), &batch, &mut adam, tcfg, iter)?;
        if let Some(f) = &mut csv {
            writeln!(f, "{},{},{},{}", row.iter, row.loss, row.lr, row.grad_norm)?;
        }
        log.push(row);

        let done = iter + 1;
        let due = tcfg.eval_interval > 0 && (done % tcfg.eval_interval == 0 || done == tcfg.total_iters);
        if let (Some(spec), true) = (&opts.eval, due) {
            let dec = decoder_for(&w, tokenizer.as_ref(), spec.seed)?;
            let instr = spec.task.instruction(cfg.instr_len, cfg.instr_vocab);
            let report = evaluate_policy(
                || ModelPolicy::new(&w, dec.clone(), spec.exec_horizon),
                spec.task,
                tcfg.eval_trials,
                spec.seed,
                cfg.views,
                &instr,
            )?;
            let row = EvalRow { iter: done, partial_rate: report.partial_rate, full_rate: report.full_rate };
            evals.push(row);
            if let Some(dir) = &opts.out_dir {
                save_weights(&w, tokenizer.as_ref(), &dir.join(format!("ckpt_{done}.ctxp")))?;
            }
            let better = best
                .as_ref()
                .is_none_or(|(b, _)| (row.full_rate, row.partial_rate) > (b.full_rate, b.partial_rate));
            if better {
                best = Some((row, w.clone()));
            }
        }
    }
    if let Some(f) = &mut csv {
        f.flush()?;
    }

    let best_iter = best.as_ref().map(|(r, _)| r.iter);
    let chosen = best.map_or_else(|| w.clone(), |(_, bw)| bw);
    if let Some(dir) = &opts.out_dir {
        save_weights(&w, tokenizer.as_ref(), &dir.join("final.ctxp"))?;
        save_weights(&chosen, tokenizer.as_ref(), &dir.join("best.ctxp"))?;
        let mut f = BufWriter::new(File::create(dir.join("evals.csv"))?);
        writeln!(f, "iter,partial_rate,full_rate")?;
        for e in &evals {
            writeln!(f, "{},{},{}", e.iter, e.partial_rate, e.full_rate)?;
        }
        f.flush()?;
    }
    Ok(TrainOutcome {
        weights: chosen,
        final_weights: w,
        tokenizer,
        log,
        evals,
        best_iter,
        skipped_steps: adam.skipped,
    })
}
