//! Flow-matching action head.
//!
//! Noised chunks follow `a^τ = τ·a + (1−τ)·ε`; the head regresses the
//! direction `ε − a`, and sampling integrates it from pure noise at `τ = 0`
//! to an action at `τ = 1`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Weights;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Tape, Tensor2, Var};

use super::chunk::{check_tau, ActionChunk, DenoiseState};

pub const DEFAULT_FLOW_STEPS: usize = 10;

/// `τ·a + (1−τ)·ε`, elementwise.
pub fn flow_noise(a: &ActionChunk, eps: &ActionChunk, tau: f64) -> Result<ActionChunk> {
    check_tau(tau)?;
    if a.values.shape() != eps.values.shape() {
        return shape_err("action and noise chunks differ in shape");
    }
    Ok(ActionChunk { values: a.values.zip(&eps.values, |x, e| tau * x + (1.0 - tau) * e)? })
}

/// Sinusoidal embedding of `τ`: `[sin(ω_i τ)…, cos(ω_i τ)…]` with
/// frequencies spaced geometrically from 1 to 100.
pub fn tau_embedding(tau: f64, dim: usize) -> Tensor2 {
    let half = dim / 2;
    let mut row = vec![0.0; dim];
    for i in 0..half {
        let freq = if half > 1 { 100f64.powf(i as f64 / (half - 1) as f64) } else { 1.0 };
        row[i] = (freq * tau).sin();
        row[half + i] = (freq * tau).cos();
    }
    Tensor2::row_vector(&row)
}

/// Conditioning vector for the head: RMS-normalised mean of the final rows.
pub fn pooled_features_on(tape: &mut Tape, w: &Weights, final_states: Var) -> Result<Var> {
    let m = tape.mean_rows(final_states)?;
    let g = tape.param(w.layout.final_norm);
    tape.rms_norm(m, g)
}

pub fn pooled_features(w: &Weights, final_states: &Tensor2) -> Result<Tensor2> {
    let mut tape = Tape::new(&w.params);
    let x = tape.constant(final_states.clone());
    let f = pooled_features_on(&mut tape, w, x)?;
    Ok(tape.value(f).clone())
}

/// Predicted direction `ε − a` for a noisy chunk, as a `1 × (l+1)·A` row.
pub fn flow_head_on(tape: &mut Tape, w: &Weights, features: Var, noisy: Var, tau: f64) -> Result<Var> {
    let t = tape.constant(tau_embedding(tau, w.cfg.tau_dim));
    head_rows_on(tape, w, features, noisy, t)
}

/// The head applied row-wise: row `i` of `noisy` and `taus` with the same
/// (broadcast) feature row.
fn head_rows_on(tape: &mut Tape, w: &Weights, features: Var, noisy: Var, taus: Var) -> Result<Var> {
    let ids = w
        .layout
        .flow
        .as_ref()
        .ok_or_else(|| Error::Config("weights have no flow head".into()))?;
    let rows = tape.value(noisy).rows();
    let f = if rows == 1 { features } else { tape.gather(features, &vec![0; rows])? };
    let x = tape.concat_cols(&[f, noisy, taus])?;
    let w1 = tape.param(ids.w1);
    let b1 = tape.param(ids.b1);
    let w2 = tape.param(ids.w2);
    let b2 = tape.param(ids.b2);
    let h = tape.linear(x, w1, Some(b1))?;
    let h = tape.gelu(h);
    tape.linear(h, w2, Some(b2))
}

/// Mean squared error between the head's prediction and `ε − a`.
pub fn flow_loss_on(
    tape: &mut Tape,
    w: &Weights,
    features: Var,
    a: &ActionChunk,
    eps: &ActionChunk,
    tau: f64,
) -> Result<Var> {
    let cfg = &w.cfg;
    a.check_shape(cfg.chunk_size(), cfg.action_dim)?;
    let noisy = flow_noise(a, eps, tau)?;
    let n = tape.constant(noisy.flatten());
    let pred = flow_head_on(tape, w, features, n, tau)?;
    let target = eps.flatten().sub(&a.flatten())?;
    let loss = tape.mse(pred, &target)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::NonFinite("flow loss".into()));
    }
    Ok(loss)
}

/// Mean of [`flow_loss_on`] over several `(ε, τ)` draws for one chunk,
/// evaluated as a single batched head pass.
pub fn flow_loss_multi_on(
    tape: &mut Tape,
    w: &Weights,
    features: Var,
    a: &ActionChunk,
    draws: &[(ActionChunk, f64)],
) -> Result<Var> {
    let cfg = &w.cfg;
    a.check_shape(cfg.chunk_size(), cfg.action_dim)?;
    if draws.is_empty() {
        return Err(Error::Invalid("no flow draws".into()));
    }
    let width = cfg.chunk_size() * cfg.action_dim;
    let mut noisy = Vec::with_capacity(draws.len() * width);
    let mut taus = Vec::with_capacity(draws.len() * cfg.tau_dim);
    let mut target = Vec::with_capacity(draws.len() * width);
    for (eps, tau) in draws {
        noisy.extend_from_slice(flow_noise(a, eps, *tau)?.flatten().data());
        taus.extend_from_slice(tau_embedding(*tau, cfg.tau_dim).data());
        target.extend_from_slice(eps.flatten().sub(&a.flatten())?.data());
    }
    let n = tape.constant(Tensor2::from_vec(draws.len(), width, noisy)?);
    let t = tape.constant(Tensor2::from_vec(draws.len(), cfg.tau_dim, taus)?);
    let pred = head_rows_on(tape, w, features, n, t)?;
    let loss = tape.mse(pred, &Tensor2::from_vec(draws.len(), width, target)?)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::NonFinite("flow loss".into()));
    }
    Ok(loss)
}

pub fn flow_loss(features: &Tensor2, a: &ActionChunk, eps: &ActionChunk, tau: f64, w: &Weights) -> Result<f64> {
    let mut tape = Tape::new(&w.params);
    let f = tape.constant(features.clone());
    let l = flow_loss_on(&mut tape, w, f, a, eps, tau)?;
    Ok(tape.scalar(l))
}

/// Euler integration of `a ← a − Δτ·v(a, τ)` over `steps` equal steps from
/// `τ = 0` (where `a = start`) to `τ = 1`.
pub fn flow_integrate<F>(start: ActionChunk, steps: usize, mut velocity: F) -> Result<ActionChunk>
where
    F: FnMut(&DenoiseState) -> Result<Tensor2>,
{
    if steps == 0 {
        return Err(Error::Invalid("flow sampling needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut state = DenoiseState::new(0.0, start)?;
    for i in 0..steps {
        let v = velocity(&state)?;
        let next = state.noisy.values.zip(&v, |a, d| a - dt * d)?;
        let tau = ((i + 1) as f64 * dt).min(1.0);
        state = DenoiseState::new(tau, ActionChunk::new(next)?)?;
    }
    Ok(state.noisy)
}

/// Samples a chunk from the trained head, starting from seeded standard
/// normal noise.
pub fn flow_sample(features: &Tensor2, w: &Weights, steps: usize, seed: u64) -> Result<ActionChunk> {
    let cfg = &w.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = ActionChunk::new(Tensor2::randn(cfg.chunk_size(), cfg.action_dim, 1.0, &mut rng))?;
    flow_integrate(start, steps, |s| {
        let mut tape = Tape::new(&w.params);
        let f = tape.constant(features.clone());
        let n = tape.constant(s.noisy.flatten());
        let v = flow_head_on(&mut tape, w, f, n, s.tau())?;
        Tensor2::from_vec(cfg.chunk_size(), cfg.action_dim, tape.value(v).data().to_vec())
    })
}
