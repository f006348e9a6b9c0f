use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Weights;
use crate::decoders::Decoder;
use crate::error::{shape_err, Error, Result};
use crate::inference::StreamingPolicy;
use crate::obs::{Instruction, Observation};

use super::tasks::{is_done, progress, render, reset, step, EnvState, Task, TaskState, ACTION_DIM};

pub const DEFAULT_TRIALS: usize = 20;

/// Closed-loop controller. `latent` exposes the true environment state for
/// scripted oracles only; pixel policies must not read it.
pub trait Policy {
    fn reset(&mut self, episode_seed: u64);
    fn act(&mut self, obs: &Observation, instr: &Instruction, latent: &EnvState) -> Result<Vec<f64>>;
}

/// The scripted expert, reading the latent state.
#[derive(Clone, Debug, Default)]
pub struct ExpertPolicy;

impl Policy for ExpertPolicy {
    fn reset(&mut self, _episode_seed: u64) {}

    fn act(&mut self, _obs: &Observation, _instr: &Instruction, latent: &EnvState) -> Result<Vec<f64>> {
        Ok(super::tasks::expert_action(latent))
    }
}

/// Uniform actions in `[−1, 1]^A`.
#[derive(Clone, Debug)]
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Policy for RandomPolicy {
    fn reset(&mut self, episode_seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(episode_seed ^ 0x5eed);
    }

    fn act(&mut self, _obs: &Observation, _instr: &Instruction, _latent: &EnvState) -> Result<Vec<f64>> {
        Ok((0..ACTION_DIM).map(|_| self.rng.gen_range(-1.0..=1.0)).collect())
    }
}

/// A trained model served through the streaming cache, mapping its
/// normalized outputs back to environment units. Executes the first
/// `exec_horizon` actions of each chunk before querying again; every frame
/// still enters the cache.
pub struct ModelPolicy<'w> {
    weights: &'w Weights,
    decoder: Decoder,
    exec_horizon: usize,
    stream: StreamingPolicy<'w>,
    queue: VecDeque<Vec<f64>>,
}

impl<'w> ModelPolicy<'w> {
    pub fn new(weights: &'w Weights, decoder: Decoder, exec_horizon: usize) -> Self {
        let exec_horizon = exec_horizon.clamp(1, weights.cfg.chunk_size());
        Self {
            weights,
            stream: StreamingPolicy::new(weights, decoder.clone()),
            decoder,
            exec_horizon,
            queue: VecDeque::new(),
        }
    }
}

impl Policy for ModelPolicy<'_> {
    fn reset(&mut self, episode_seed: u64) {
        self.stream = StreamingPolicy::new(self.weights, self.decoder.with_seed(episode_seed));
        self.queue.clear();
    }

    fn act(&mut self, obs: &Observation, instr: &Instruction, _latent: &EnvState) -> Result<Vec<f64>> {
        if self.queue.is_empty() {
            let chunk = self.stream.step(obs, instr)?;
            for t in 0..self.exec_horizon {
                self.queue.push_back(self.weights.cfg.denormalize_action(chunk.action(t)));
            }
        } else {
            self.stream.observe(obs)?;
        }
        let a = self.queue.pop_front().expect("queue refilled above");
        if a.len() != ACTION_DIM {
            return shape_err(format!("policy produced {} action entries, expected {ACTION_DIM}", a.len()));
        }
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub seed: u64,
    pub steps: usize,
    pub partial: bool,
    pub full: bool,
    /// Task progress: completed strokes, trips, or 1 for a correct lift.
    pub score: f64,
    /// First action coordinate executed at every step.
    pub actions: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessReport {
    pub task: Task,
    pub trials: usize,
    pub partial_rate: f64,
    pub full_rate: f64,
    pub episodes: Vec<EpisodeTrace>,
}

fn score(s: &EnvState) -> f64 {
    match &s.inner {
        TaskState::Parity(h) => h.strokes as f64,
        TaskState::Pnp(p) => f64::from(p.phase),
        TaskState::Shell(sh) => f64::from(u8::from(sh.lifted == Some(true))),
    }
}

pub fn run_episode<P: Policy>(policy: &mut P, task: Task, seed: u64, views: usize, instr: &Instruction) -> Result<EpisodeTrace> {
    policy.reset(seed);
    let mut s = reset(task, seed);
    let mut actions = Vec::new();
    while !is_done(&s) {
        let obs = render(&s, views);
        let a = policy.act(&obs, instr, &s)?;
        if a.len() != ACTION_DIM {
            return shape_err(format!("policy produced {} action entries, expected {ACTION_DIM}", a.len()));
        }
        actions.push(a[0]);
        s = step(&s, &a)?;
    }
    let p = progress(&s);
    Ok(EpisodeTrace { seed, steps: s.t, partial: p.partial, full: p.full, score: score(&s), actions })
}

/// Seeds of the evaluation episodes for a base seed.
pub fn episode_seeds(trials: usize, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x0e7a_1000));
    (0..trials).map(|_| rng.gen()).collect()
}

/// Runs `trials` closed-loop episodes (in parallel, one policy per episode)
/// and reports partial and full success rates.
pub fn evaluate_policy<P, F>(
    make: F,
    task: Task,
    trials: usize,
    seed: u64,
    views: usize,
    instr: &Instruction,
) -> Result<SuccessReport>
where
    P: Policy,
    F: Fn() -> P + Sync,
{
    if trials == 0 {
        return Err(Error::Invalid("need at least one trial".into()));
    }
    let episodes = episode_seeds(trials, seed)
        .into_par_iter()
        .map(|s| run_episode(&mut make(), task, s, views, instr))
        .collect::<Result<Vec<_>>>()?;
    let rate = |f: fn(&EpisodeTrace) -> bool| episodes.iter().filter(|e| f(e)).count() as f64 / trials as f64;
    Ok(SuccessReport {
        task,
        trials,
        partial_rate: rate(|e| e.partial),
        full_rate: rate(|e| e.full),
        episodes,
    })
}
