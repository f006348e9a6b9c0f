use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use ctxp_core::backbone::{load_checkpoint, DecoderKind, Weights};
use ctxp_core::decoders::{Decoder, FastTokenizer};
use ctxp_core::envs::{
    evaluate_policy, generate_dataset, load_dataset, save_dataset, ExpertPolicy, GenOptions, ModelPolicy,
    SuccessReport, Task,
};
use ctxp_core::inference::{bench, bench_csv, BenchMode};
use ctxp_core::train::{decoder_for, tokenizer_path, train_bc, EvalSpec, TrainOptions, TrainOutcome};
use serde_json::json;

use crate::manifest::RunManifest;
use crate::settings::{ConfigArgs, Settings};
use crate::{print_table, Usage};

pub const DATASET_FILE: &str = "dataset.ctxd";
pub const CHECKPOINT_FILE: &str = "best.ctxp";
pub const EVAL_CSV_HEADER: &str = "task,policy,trials,partial_rate,full_rate";
pub const EPISODES_CSV_HEADER: &str = "seed,steps,partial,full,score";
/// Offset between the training seed and the seed of in-training evaluations,
/// so checkpoint selection does not use the episodes of a later `eval`.
const SELECTION_SEED_OFFSET: u64 = 0x5e1e_c700;

fn need_dir(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref().ok_or_else(|| Usage("--out is required".into()).into())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// A dataset file, or a directory written by `gen-data`.
pub fn resolve_data(path: &Path) -> Result<PathBuf> {
    let file = if path.is_dir() { path.join(DATASET_FILE) } else { path.to_path_buf() };
    if !file.is_file() {
        return Err(Usage(format!("dataset {} does not exist", file.display())).into());
    }
    Ok(file)
}

/// A checkpoint file, or a directory written by `train`.
pub fn resolve_ckpt(path: &Path) -> Result<PathBuf> {
    let file = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    if !file.is_file() {
        return Err(Usage(format!("checkpoint {} does not exist", file.display())).into());
    }
    Ok(file)
}

pub fn load_model(path: &Path) -> Result<(Weights, Option<FastTokenizer>)> {
    let w = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let tok = match w.cfg.decoder {
        DecoderKind::Flow => None,
        DecoderKind::Autoregressive => Some(FastTokenizer::load(&tokenizer_path(path))?),
    };
    Ok((w, tok))
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// parity | pnp | shell
    pub task: Task,
    #[arg(long, default_value_t = 50)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub views: usize,
    /// Gaussian noise on recorded actions.
    #[arg(long, default_value_t = 0.0)]
    pub action_noise: f64,
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let dir = need_dir(&a.out)?;
    let opts = GenOptions { views: a.views, action_noise: a.action_noise };
    let ds = generate_dataset(a.task, a.episodes, a.seed, &opts)?;
    create_dir(dir)?;
    save_dataset(&ds, &dir.join(DATASET_FILE))?;
    let config = json!({ "task": a.task.name(), "episodes": a.episodes, "views": a.views, "action_noise": a.action_noise });
    RunManifest::new("gen-data", config, a.seed, &[])?.write(dir)?;
    let solved = ds.episodes.iter().filter(|e| e.success).count();
    print_table(
        &["task", "episodes", "steps", "expert_success"],
        &[vec![a.task.name().into(), ds.episodes.len().to_string(), ds.total_steps().to_string(), format!("{solved}/{}", ds.episodes.len())]],
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Task used for checkpoint selection (defaults to the dataset's task).
    #[arg(long)]
    pub eval_task: Option<Task>,
    /// Skip periodic evaluation; the final weights are the checkpoint.
    #[arg(long)]
    pub no_eval: bool,
}

/// Trains on `data` into `dir` and writes the manifest. Shared with `ablate`.
pub fn run_training(
    data: &Path,
    dir: &Path,
    s: &Settings,
    eval_task: Option<Task>,
    no_eval: bool,
    command: &str,
) -> Result<TrainOutcome> {
    let ds = load_dataset(data).with_context(|| format!("loading {}", data.display()))?;
    let task = match eval_task {
        Some(t) => t,
        None => ds.task.parse()?,
    };
    let eval = (!no_eval && s.train.eval_interval > 0).then(|| EvalSpec {
        task,
        seed: s.train.seed.wrapping_add(SELECTION_SEED_OFFSET),
        exec_horizon: 1,
    });
    create_dir(dir)?;
    let out = train_bc(&ds, &s.model, &s.train, &TrainOptions { out_dir: Some(dir.to_path_buf()), eval })?;
    let effective = Settings { model: out.weights.cfg.clone(), train: s.train.clone() };
    fs::write(dir.join("config.txt"), effective.to_kv())?;
    RunManifest::new(command, effective.to_json(), s.train.seed, &[data.to_path_buf()])?.write(dir)?;
    Ok(out)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let dir = need_dir(&a.out)?;
    let data = resolve_data(&a.data)?;
    let s = Settings::from_args(&a.cfg)?;
    let out = run_training(&data, dir, &s, a.eval_task, a.no_eval, "train")?;
    let last = out.log.last().map_or(f64::NAN, |r| r.loss);
    let mut rows: Vec<Vec<String>> =
        out.evals.iter().map(|e| vec![e.iter.to_string(), format!("{:.2}", e.partial_rate), format!("{:.2}", e.full_rate)]).collect();
    if rows.is_empty() {
        rows.push(vec![s.train.total_iters.to_string(), "-".into(), "-".into()]);
    }
    print_table(&["iter", "partial", "full"], &rows);
    println!(
        "final loss {last:.5}, best iter {}, skipped steps {}, checkpoint {}",
        out.best_iter.map_or("final".into(), |i| i.to_string()),
        out.skipped_steps,
        dir.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint file or training directory.
    #[arg(long, required_unless_present = "expert")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub task: Task,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Actions executed per predicted chunk.
    #[arg(long, default_value_t = 1)]
    pub exec_horizon: usize,
    /// Evaluate the scripted expert instead of a checkpoint.
    #[arg(long, conflicts_with = "ckpt")]
    pub expert: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn evaluate_checkpoint(w: &Weights, tok: Option<&FastTokenizer>, task: Task, trials: usize, seed: u64, horizon: usize) -> Result<SuccessReport> {
    let dec: Decoder = decoder_for(w, tok, seed)?;
    let instr = task.instruction(w.cfg.instr_len, w.cfg.instr_vocab);
    Ok(evaluate_policy(|| ModelPolicy::new(w, dec.clone(), horizon), task, trials, seed, w.cfg.views, &instr)?)
}

pub fn eval_csv(report: &SuccessReport, policy: &str) -> String {
    format!(
        "{EVAL_CSV_HEADER}\n{},{policy},{},{},{}\n",
        report.task.name(),
        report.trials,
        report.partial_rate,
        report.full_rate
    )
}

pub fn episodes_csv(report: &SuccessReport) -> String {
    let mut s = format!("{EPISODES_CSV_HEADER}\n");
    for e in &report.episodes {
        s.push_str(&format!("{},{},{},{},{}\n", e.seed, e.steps, e.partial, e.full, e.score));
    }
    s
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    if a.exec_horizon == 0 {
        return Err(Usage("--exec-horizon must be at least 1".into()).into());
    }
    let (report, policy, inputs) = if a.expert {
        let instr = a.task.instruction(2, 16);
        (evaluate_policy(|| ExpertPolicy, a.task, a.trials, a.seed, 1, &instr)?, "expert".to_string(), vec![])
    } else {
        let path = resolve_ckpt(a.ckpt.as_deref().expect("clap requires --ckpt without --expert"))?;
        let (w, tok) = load_model(&path)?;
        let r = evaluate_checkpoint(&w, tok.as_ref(), a.task, a.trials, a.seed, a.exec_horizon)?;
        (r, "model".to_string(), vec![path])
    };
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        fs::write(dir.join("eval.csv"), eval_csv(&report, &policy))?;
        fs::write(dir.join("episodes.csv"), episodes_csv(&report))?;
        let config = json!({ "task": a.task.name(), "trials": a.trials, "policy": policy, "exec_horizon": a.exec_horizon });
        RunManifest::new("eval", config, a.seed, &inputs)?.write(dir)?;
    }
    print_table(
        &["task", "policy", "trials", "partial", "full"],
        &[vec![
            a.task.name().into(),
            policy,
            a.trials.to_string(),
            format!("{:.2}", report.partial_rate),
            format!("{:.2}", report.full_rate),
        ]],
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Checkpoint to time; a randomly initialised default-size model if absent.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Comma-separated subset of uncompressed, compressed, cached.
    #[arg(long, value_delimiter = ',', default_value = "uncompressed,compressed,cached")]
    pub modes: Vec<BenchMode>,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn bench_cmd(a: &BenchArgs) -> Result<()> {
    let (w, tok, inputs) = match &a.ckpt {
        Some(p) => {
            let path = resolve_ckpt(p)?;
            let (w, tok) = load_model(&path)?;
            (w, tok, vec![path])
        }
        None => (Weights::init(&ctxp_core::backbone::ModelConfig::default(), a.seed)?, None, vec![]),
    };
    let dec = decoder_for(&w, tok.as_ref(), a.seed)?;
    // one worker for stable timings
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build()?;
    let rows = pool.install(|| bench(&w, &dec, &a.modes, a.trials, a.seed))?;
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        fs::write(dir.join("bench.csv"), bench_csv(&rows))?;
        let modes: Vec<String> = a.modes.iter().map(|m| m.to_string()).collect();
        let config = json!({ "modes": modes, "trials": a.trials, "model": w.cfg });
        RunManifest::new("bench", config, a.seed, &inputs)?.write(dir)?;
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.mode.to_string(), format!("{:.3}", r.median_ms), format!("{:.3}", r.p90_ms), r.key_tokens.to_string(), r.attn_macs.to_string()])
        .collect();
    print_table(&["mode", "median_ms", "p90_ms", "key_tokens", "attn_macs"], &table);
    Ok(())
}
