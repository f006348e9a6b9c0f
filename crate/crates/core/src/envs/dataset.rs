//! Demonstration files.
//!
//! ```text
//! "CTXD" | version u32 | task_len u32 | task | episodes u32
//! total_steps u32 | height u32 | width u32 | channels u32 | views u32 | action_dim u32
//! per episode: steps u32 | instruction u32 | success u8
//!   per step: V·H·W·C image bytes | A × f32
//! ```
//!
//! A JSON sidecar with the same header fields sits next to the file.

use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::obs::{Image, Observation};

use super::tasks::{expert_action, is_done, progress, render, reset, step, Task, ACTION_DIM, IMAGE_SIZE};

pub const DATASET_MAGIC: &[u8; 4] = b"CTXD";
pub const DATASET_VERSION: u32 = 1;
pub const DEFAULT_EPISODES: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct DemoStep {
    pub obs: Observation,
    pub action: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub task: Task,
    pub seed: u64,
    pub instruction: u32,
    pub success: bool,
    pub steps: Vec<DemoStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub magic: String,
    pub version: u32,
    pub task: String,
    pub episodes: usize,
    pub total_steps: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub views: usize,
    pub action_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub views: usize,
    pub action_dim: usize,
    pub episodes: Vec<Demonstration>,
}

impl Dataset {
    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            magic: "CTXD".into(),
            version: DATASET_VERSION,
            task: self.task.clone(),
            episodes: self.episodes.len(),
            total_steps: self.total_steps(),
            height: self.height,
            width: self.width,
            channels: self.channels,
            views: self.views,
            action_dim: self.action_dim,
        }
    }
}

/// Options for scripted demonstrations.
#[derive(Clone, Debug)]
pub struct GenOptions {
    pub views: usize,
    /// Standard deviation of Gaussian noise on recorded actions (0 = off).
    pub action_noise: f64,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self { views: 1, action_noise: 0.0 }
    }
}

/// One scripted episode. Noise, when enabled, perturbs the recorded and
/// executed action alike.
pub fn expert_episode(task: Task, seed: u64, opts: &GenOptions) -> Result<Demonstration> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let noise = Normal::new(0.0, opts.action_noise.max(0.0)).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut s = reset(task, seed);
    let mut steps = Vec::new();
    while !is_done(&s) {
        let mut a = expert_action(&s);
        if opts.action_noise > 0.0 {
            for v in &mut a {
                *v = (*v + noise.sample(&mut rng)).clamp(-1.0, 1.0);
            }
        }
        steps.push(DemoStep { obs: render(&s, opts.views), action: a.clone() });
        s = step(&s, &a)?;
    }
    Ok(Demonstration { task, seed, instruction: task.instruction_id(), success: progress(&s).full, steps })
}

/// `episodes` scripted demonstrations with per-episode seeds drawn from `seed`.
pub fn generate_dataset(task: Task, episodes: usize, seed: u64, opts: &GenOptions) -> Result<Dataset> {
    if episodes == 0 {
        return Err(Error::Invalid("need at least one episode".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let demos = (0..episodes).map(|_| expert_episode(task, rng.gen(), opts)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        task: task.name().into(),
        height: IMAGE_SIZE,
        width: IMAGE_SIZE,
        channels: 1,
        views: opts.views,
        action_dim: ACTION_DIM,
        episodes: demos,
    })
}

fn u32_of(n: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(n).map(u32::to_le_bytes).map_err(|_| Error::Format(format!("{what} too large")))
}

pub fn write_dataset<W: Write>(ds: &Dataset, out: &mut W) -> Result<()> {
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&DATASET_VERSION.to_le_bytes())?;
    out.write_all(&u32_of(ds.task.len(), "task name")?)?;
    out.write_all(ds.task.as_bytes())?;
    out.write_all(&u32_of(ds.episodes.len(), "episode count")?)?;
    for v in [ds.total_steps(), ds.height, ds.width, ds.channels, ds.views, ds.action_dim] {
        out.write_all(&u32_of(v, "header field")?)?;
    }
    let frame = ds.height * ds.width * ds.channels;
    for e in &ds.episodes {
        out.write_all(&u32_of(e.steps.len(), "step count")?)?;
        out.write_all(&e.instruction.to_le_bytes())?;
        out.write_all(&[u8::from(e.success)])?;
        for s in &e.steps {
            s.obs.check_shape(ds.views, ds.height, ds.width, ds.channels)?;
            for v in &s.obs.views {
                debug_assert_eq!(v.data.len(), frame);
                out.write_all(&v.data)?;
            }
            if s.action.len() != ds.action_dim {
                return Err(Error::Shape(format!("action of {} entries", s.action.len())));
            }
            for a in &s.action {
                out.write_all(&(*a as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_dataset<R: Read>(r: &mut R) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let name_len = read_u32(r)? as usize;
    if name_len > 1024 {
        return Err(Error::Format("task name too long".into()));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let task = String::from_utf8(name).map_err(|_| Error::Format("task name is not UTF-8".into()))?;
    let episodes = read_u32(r)? as usize;
    let total = read_u32(r)? as usize;
    let (height, width, channels, views, action_dim) =
        (read_u32(r)? as usize, read_u32(r)? as usize, read_u32(r)? as usize, read_u32(r)? as usize, read_u32(r)? as usize);
    let task_kind: Task = task.parse()?;
    let frame = height * width * channels;
    let mut demos = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let n = read_u32(r)? as usize;
        let instruction = read_u32(r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let mut steps = Vec::with_capacity(n);
        for _ in 0..n {
            let mut imgs = Vec::with_capacity(views);
            for _ in 0..views {
                let mut data = vec![0u8; frame];
                r.read_exact(&mut data)?;
                imgs.push(Image::from_data(height, width, channels, data)?);
            }
            let mut raw = vec![0u8; action_dim * 4];
            r.read_exact(&mut raw)?;
            let action =
                raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
            steps.push(DemoStep { obs: Observation { views: imgs }, action });
        }
        demos.push(Demonstration { task: task_kind, seed: 0, instruction, success: flag[0] != 0, steps });
    }
    let ds = Dataset { task, height, width, channels, views, action_dim, episodes: demos };
    if ds.total_steps() != total {
        return Err(Error::Format(format!("header says {total} steps, file holds {}", ds.total_steps())));
    }
    Ok(ds)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Writes the binary file and its JSON sidecar.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    write_dataset(ds, &mut f)?;
    f.flush()?;
    let mut header = serde_json::to_value(ds.header()).map_err(|e| Error::Format(e.to_string()))?;
    header["episode_seeds"] = ds.episodes.iter().map(|e| e.seed).collect::<Vec<_>>().into();
    let json = serde_json::to_string_pretty(&header).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(sidecar_path(path), json + "\n")?;
    Ok(())
}

/// Reads a dataset; episode seeds are restored from the sidecar when present.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut ds = read_dataset(&mut f)?;
    if let Ok(text) = std::fs::read_to_string(sidecar_path(path)) {
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        if let Some(seeds) = v["episode_seeds"].as_array() {
            for (e, s) in ds.episodes.iter_mut().zip(seeds) {
                e.seed = s.as_u64().unwrap_or(0);
            }
        }
    }
    Ok(ds)
}
