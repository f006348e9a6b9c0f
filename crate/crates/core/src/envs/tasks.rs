use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::obs::{Image, Instruction, Observation};

pub const IMAGE_SIZE: usize = 32;
pub const ACTION_DIM: usize = 4;
pub const MAX_STEPS: usize = 200;

/// Closedness change per step of the scripted hand.
pub const HAND_RATE: f64 = 0.125;
pub const HAND_CLOSED: f64 = 0.95;
pub const HAND_OPEN: f64 = 0.05;
pub const HAND_CYCLES: usize = 5;

pub const GRID: usize = 16;
pub const PLATE_A: usize = 1;
pub const PLATE_B: usize = 14;

pub const CUP_LEFT: usize = 5;
pub const CUP_RIGHT: usize = 10;
/// Steps during which the object is visible before the cups come down.
pub const REVEAL_STEPS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Parity,
    Pnp,
    Shell,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Parity, Task::Pnp, Task::Shell];

    pub fn name(self) -> &'static str {
        match self {
            Task::Parity => "parity",
            Task::Pnp => "pnp",
            Task::Shell => "shell",
        }
    }

    /// Fixed instruction id of the task.
    pub fn instruction_id(self) -> u32 {
        match self {
            Task::Parity => 1,
            Task::Pnp => 2,
            Task::Shell => 3,
        }
    }

    /// Token sequence of the task's fixed instruction.
    pub fn instruction(self, len: usize, vocab: usize) -> Instruction {
        instruction_tokens(self.instruction_id(), len, vocab)
    }
}

pub fn instruction_tokens(id: u32, len: usize, vocab: usize) -> Instruction {
    let id = id as usize;
    Instruction::new((0..len).map(|i| (id * 3 + i * (id + 1)) % vocab.max(1)).collect())
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "parity" | "parityhand" | "parity-hand" => Ok(Task::Parity),
            "pnp" | "pnptwice" | "pnp-twice" => Ok(Task::Pnp),
            "shell" | "shellgame" | "shell-game" => Ok(Task::Shell),
            _ => Err(Error::Invalid(format!("unknown task '{s}'"))),
        }
    }
}

/// A hand that must be clenched and unclenched repeatedly. Mid-stroke
/// renderings do not reveal which way the hand is moving.
#[derive(Clone, Debug, PartialEq)]
pub struct HandState {
    pub closedness: f64,
    /// +1 while closing, −1 while opening.
    pub direction: i8,
    /// Completed strokes (each full cycle is two).
    pub strokes: usize,
}

/// Carry an object from plate A to plate B and back again. The trip count
/// is never drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct PnpState {
    pub gripper: usize,
    pub closed: bool,
    /// Object cell, or `None` while held.
    pub object: Option<usize>,
    /// Completed trips: 0, 1 or 2.
    pub phase: u8,
}

/// An object hidden under one of two identical cups after a brief reveal.
#[derive(Clone, Debug, PartialEq)]
pub struct ShellState {
    pub gripper: usize,
    /// `true` when the object is under the right cup.
    pub right: bool,
    /// Cup lifted so far: `Some(true)` if it was the right one.
    pub lifted: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskState {
    Parity(HandState),
    Pnp(PnpState),
    Shell(ShellState),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub task: Task,
    pub t: usize,
    pub inner: TaskState,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub partial: bool,
    pub full: bool,
}

pub fn reset(task: Task, seed: u64) -> EnvState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inner = match task {
        Task::Parity => TaskState::Parity(HandState {
            closedness: HAND_RATE * rng.gen_range(2..=6) as f64,
            direction: if rng.gen() { 1 } else { -1 },
            strokes: 0,
        }),
        Task::Pnp => {
            TaskState::Pnp(PnpState { gripper: rng.gen_range(0..GRID), closed: false, object: Some(PLATE_A), phase: 0 })
        }
        Task::Shell => TaskState::Shell(ShellState { gripper: GRID / 2, right: rng.gen(), lifted: None }),
    };
    EnvState { task, t: 0, inner }
}

fn check_action(a: &[f64]) -> Result<()> {
    if a.len() != ACTION_DIM {
        return shape_err(format!("action has {} entries, expected {ACTION_DIM}", a.len()));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("action".into()));
    }
    Ok(())
}

fn grid_move(x: usize, a: f64) -> usize {
    if a > 0.5 {
        (x + 1).min(GRID - 1)
    } else if a < -0.5 {
        x.saturating_sub(1)
    } else {
        x
    }
}

/// Deterministic transition. Actions are clipped to `[−1, 1]`.
pub fn step(state: &EnvState, action: &[f64]) -> Result<EnvState> {
    check_action(action)?;
    let a: Vec<f64> = action.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    let mut s = state.clone();
    s.t += 1;
    match &mut s.inner {
        TaskState::Parity(h) => {
            h.closedness = (h.closedness + a[0].clamp(-HAND_RATE, HAND_RATE)).clamp(0.0, 1.0);
            if h.direction > 0 && h.closedness >= HAND_CLOSED {
                h.direction = -1;
                h.strokes += 1;
            } else if h.direction < 0 && h.closedness <= HAND_OPEN {
                h.direction = 1;
                h.strokes += 1;
            }
        }
        TaskState::Pnp(p) => {
            let close = a[1] > 0.0;
            if close && !p.closed && p.object == Some(p.gripper) {
                p.object = None;
            } else if !close && p.object.is_none() {
                p.object = Some(p.gripper);
                if p.phase == 0 && p.gripper == PLATE_B {
                    p.phase = 1;
                } else if p.phase == 1 && p.gripper == PLATE_A {
                    p.phase = 2;
                }
            }
            p.closed = close;
            p.gripper = grid_move(p.gripper, a[0]);
        }
        TaskState::Shell(sh) => {
            if sh.lifted.is_none() {
                if state.t >= REVEAL_STEPS && a[1] > 0.5 && (sh.gripper == CUP_LEFT || sh.gripper == CUP_RIGHT) {
                    sh.lifted = Some((sh.gripper == CUP_RIGHT) == sh.right);
                } else {
                    sh.gripper = grid_move(sh.gripper, a[0]);
                }
            }
        }
    }
    Ok(s)
}

pub fn progress(state: &EnvState) -> Progress {
    match &state.inner {
        TaskState::Parity(h) => Progress { partial: h.strokes >= 2, full: h.strokes >= 2 * HAND_CYCLES },
        TaskState::Pnp(p) => Progress { partial: p.phase >= 1, full: p.phase >= 2 },
        TaskState::Shell(s) => Progress { partial: s.lifted.is_some(), full: s.lifted == Some(true) },
    }
}

/// Episode over: full success, an irrevocable outcome, or the step budget.
pub fn is_done(state: &EnvState) -> bool {
    let p = progress(state);
    let settled = matches!(&state.inner, TaskState::Shell(s) if s.lifted.is_some());
    p.full || settled || state.t >= MAX_STEPS
}

/// Scripted optimal action; reads latent state the renderer never shows.
pub fn expert_action(state: &EnvState) -> Vec<f64> {
    let mut a = vec![0.0; ACTION_DIM];
    match &state.inner {
        TaskState::Parity(h) => a[0] = HAND_RATE * f64::from(h.direction),
        TaskState::Pnp(p) => {
            let target = if p.phase == 0 { PLATE_B } else { PLATE_A };
            let toward = |from: usize, to: usize| (to as f64 - from as f64).signum();
            match p.object {
                None if p.gripper == target => a[1] = -1.0,
                None => {
                    a[0] = toward(p.gripper, target);
                    a[1] = 1.0;
                }
                Some(o) if o == p.gripper && !p.closed => a[1] = 1.0,
                Some(o) if o == p.gripper => a[1] = -1.0,
                Some(o) => {
                    a[0] = toward(p.gripper, o);
                    a[1] = -1.0;
                }
            }
        }
        TaskState::Shell(s) => {
            if state.t >= REVEAL_STEPS {
                let cup = if s.right { CUP_RIGHT } else { CUP_LEFT };
                if s.gripper == cup {
                    a[1] = 1.0;
                } else {
                    a[0] = (cup as f64 - s.gripper as f64).signum();
                    a[1] = -1.0;
                }
            } else {
                a[1] = -1.0;
            }
        }
    }
    a
}

fn fill(img: &mut Image, y0: usize, y1: usize, x0: usize, x1: usize, v: u8) {
    for y in y0..y1.min(img.height) {
        for x in x0..x1.min(img.width) {
            img.set(y, x, 0, v);
        }
    }
}

fn cell(img: &mut Image, y0: usize, y1: usize, c: usize, v: u8) {
    let w = IMAGE_SIZE / GRID;
    fill(img, y0, y1, c * w, (c + 1) * w, v);
}

/// Canonical single-view rendering; depends only on the visible fields.
pub fn render_view(state: &EnvState) -> Image {
    let mut img = Image::new(IMAGE_SIZE, IMAGE_SIZE, 1);
    match &state.inner {
        TaskState::Parity(h) => {
            let width = h.closedness * IMAGE_SIZE as f64;
            for x in 0..IMAGE_SIZE {
                let v = ((width - x as f64).clamp(0.0, 1.0) * 255.0).round() as u8;
                for y in 12..20 {
                    img.set(y, x, 0, v);
                }
            }
            fill(&mut img, 22, 24, 0, IMAGE_SIZE, 60);
        }
        TaskState::Pnp(p) => {
            cell(&mut img, 4, 8, p.gripper, if p.closed { 255 } else { 140 });
            let obj = p.object.unwrap_or(p.gripper);
            cell(&mut img, 12, 18, obj, 200);
            cell(&mut img, 24, 28, PLATE_A, 100);
            cell(&mut img, 24, 28, PLATE_B, 100);
        }
        TaskState::Shell(s) => {
            cell(&mut img, 4, 8, s.gripper, 255);
            let obj = if s.right { CUP_RIGHT } else { CUP_LEFT };
            if state.t < REVEAL_STEPS {
                cell(&mut img, 20, 24, obj, 200);
            } else {
                for c in [CUP_LEFT, CUP_RIGHT] {
                    let lifted = s.lifted.is_some() && s.gripper == c;
                    let (y0, y1) = if lifted { (10, 16) } else { (16, 24) };
                    cell(&mut img, y0, y1, c, 120);
                }
                if s.lifted.is_some() {
                    cell(&mut img, 20, 24, obj, 200);
                }
            }
        }
    }
    img
}

/// `views` images: view 0 is canonical, later views are mirrored and shifted.
pub fn render(state: &EnvState, views: usize) -> Observation {
    let base = render_view(state);
    let mut out = Vec::with_capacity(views);
    for v in 0..views {
        if v == 0 {
            out.push(base.clone());
            continue;
        }
        let mut img = Image::new(base.height, base.width, base.channels);
        for y in 0..base.height {
            for x in 0..base.width {
                let sy = (y + v) % base.height;
                img.set(y, x, 0, base.get(sy, base.width - 1 - x, 0));
            }
        }
        out.push(img);
    }
    Observation { views: out }
}
