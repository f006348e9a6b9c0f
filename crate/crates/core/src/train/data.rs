use rand::Rng;

use crate::backbone::ModelConfig;
use crate::decoders::ActionChunk;
use crate::envs::{instruction_tokens, Dataset};
use crate::error::{shape_err, Error, Result};
use crate::obs::{Instruction, Observation};

/// One training example: `k` past frames (oldest first), the current frame,
/// the instruction, and the next `l+1` expert actions in the model's
/// normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub episode: usize,
    pub t: usize,
    pub history: Vec<Observation>,
    pub current: Observation,
    pub instr: Instruction,
    pub target: ActionChunk,
}

pub fn check_dataset(ds: &Dataset, cfg: &ModelConfig) -> Result<()> {
    let want = (cfg.image_height, cfg.image_width, cfg.image_channels, cfg.views, cfg.action_dim);
    let got = (ds.height, ds.width, ds.channels, ds.views, ds.action_dim);
    if want != got {
        return shape_err(format!("dataset (H, W, C, V, A) = {got:?}, model expects {want:?}"));
    }
    if ds.episodes.iter().all(|e| e.steps.is_empty()) {
        return Err(Error::Invalid("dataset has no steps".into()));
    }
    Ok(())
}

/// The window at step `t` of an episode. History before the first frame is
/// padded with the first frame; the chunk past the last step repeats the
/// final action.
pub fn window_at(ds: &Dataset, cfg: &ModelConfig, episode: usize, t: usize) -> Result<Window> {
    let demo = ds
        .episodes
        .get(episode)
        .ok_or_else(|| Error::Invalid(format!("episode {episode} out of range")))?;
    let steps = &demo.steps;
    if t >= steps.len() {
        return Err(Error::Invalid(format!("step {t} out of range for episode of {}", steps.len())));
    }
    let k = cfg.history_len;
    let history = (0..k).map(|i| steps[(t + i).saturating_sub(k)].obs.clone()).collect();
    let rows: Vec<Vec<f64>> =
        (0..cfg.chunk_size()).map(|i| cfg.normalize_action(&steps[(t + i).min(steps.len() - 1)].action)).collect();
    Ok(Window {
        episode,
        t,
        history,
        current: steps[t].obs.clone(),
        instr: instruction_tokens(demo.instruction, cfg.instr_len, cfg.instr_vocab),
        target: ActionChunk::from_rows(&rows)?,
    })
}

/// Draws `(episode, t)` uniformly over all steps of the dataset.
pub fn sample_window<R: Rng>(ds: &Dataset, cfg: &ModelConfig, rng: &mut R) -> Result<Window> {
    let total = ds.total_steps();
    if total == 0 {
        return Err(Error::Invalid("dataset has no steps".into()));
    }
    let mut idx = rng.gen_range(0..total);
    for (e, demo) in ds.episodes.iter().enumerate() {
        if idx < demo.steps.len() {
            return window_at(ds, cfg, e, idx);
        }
        idx -= demo.steps.len();
    }
    unreachable!("index below total step count")
}

/// Target chunks at every step of every episode.
pub fn all_chunks(ds: &Dataset, cfg: &ModelConfig) -> Result<Vec<ActionChunk>> {
    let mut out = Vec::with_capacity(ds.total_steps());
    for (e, demo) in ds.episodes.iter().enumerate() {
        for t in 0..demo.steps.len() {
            out.push(window_at(ds, cfg, e, t)?.target);
        }
    }
    Ok(out)
}

/// Per-dimension largest absolute action in the dataset (1 for dimensions
/// that are always zero).
pub fn action_scale(ds: &Dataset) -> Vec<f64> {
    let mut scale = vec![0.0f64; ds.action_dim];
    for step in ds.episodes.iter().flat_map(|e| &e.steps) {
        for (s, a) in scale.iter_mut().zip(&step.action) {
            *s = s.max(a.abs());
        }
    }
    scale.into_iter().map(|s| if s > 1e-12 { s } else { 1.0 }).collect()
}
