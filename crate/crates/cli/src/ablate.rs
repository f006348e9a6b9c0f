use std::fs;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, ValueEnum};
use ctxp_core::backbone::Weights;
use ctxp_core::decoders::FastTokenizer;
use ctxp_core::envs::{load_dataset, render, reset, Task};
use ctxp_core::inference::oracle_act_counted;
use ctxp_core::train::decoder_for;
use rayon::prelude::*;
use serde_json::json;

use crate::commands::{evaluate_checkpoint, resolve_data, run_training};
use crate::manifest::RunManifest;
use crate::settings::{ConfigArgs, Settings};
use crate::{print_table, Usage};

pub const SWEEP_CSV_HEADER: &str = "axis,setting,frames,num_blocks,split_n,context_token,key_tokens,partial_rate,full_rate";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    /// Frames per decision: 1, 2, 4, 8.
    Frames,
    /// Split block 1, 2, 4, 6, 8 in an 8-block model.
    Depth,
    /// Pool past frames into the context token, or discard them.
    Context,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Frames => "frames",
            Axis::Depth => "depth",
            Axis::Context => "context",
        }
    }

    /// `(label, settings)` for every point of the sweep.
    pub fn settings(self, base: &Settings) -> Vec<(String, Settings)> {
        let with = |f: &dyn Fn(&mut Settings)| {
            let mut s = base.clone();
            f(&mut s);
            s
        };
        match self {
            Axis::Frames => [1, 2, 4, 8]
                .into_iter()
                .map(|n| (format!("frames={n}"), with(&|s| s.model.history_len = n - 1)))
                .collect(),
            Axis::Depth => [1, 2, 4, 6, 8]
                .into_iter()
                .map(|n| {
                    (format!("n={n}"), with(&|s| {
                        s.model.num_blocks = 8;
                        s.model.split_block = n;
                    }))
                })
                .collect(),
            Axis::Context => [("keep", true), ("discard", false)]
                .into_iter()
                .map(|(l, keep)| (l.to_string(), with(&|s| s.model.context_token = keep)))
                .collect(),
        }
    }
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub axis: Axis,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Evaluation task (defaults to the dataset's task).
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub eval_seed: u64,
}

#[derive(Clone, Debug)]
struct Point {
    label: String,
    settings: Settings,
    key_tokens: u64,
    partial: f64,
    full: f64,
}

/// Attention key tokens of one act with a full history.
fn key_tokens(w: &Weights, tok: Option<&FastTokenizer>, task: Task) -> Result<u64> {
    let frame = render(&reset(task, 0), w.cfg.views);
    let history = vec![frame.clone(); w.cfg.history_len];
    let instr = task.instruction(w.cfg.instr_len, w.cfg.instr_vocab);
    let dec = decoder_for(w, tok, 0)?;
    Ok(oracle_act_counted(&history, &frame, &instr, &dec, w)?.1.key_tokens)
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let dir = a.out.as_deref().ok_or_else(|| Usage("--out is required".into()))?;
    let data = resolve_data(&a.data)?;
    let base = Settings::from_args(&a.cfg)?;
    let points = a.axis.settings(&base);
    for (_, s) in &points {
        s.validate()?;
    }
    let task = match a.task {
        Some(t) => t,
        None => load_dataset(&data)?.task.parse()?,
    };
    fs::create_dir_all(dir)?;
    let results = points
        .into_par_iter()
        .map(|(label, s)| {
            let sub = dir.join(label.replace('=', "_"));
            let out = run_training(&data, &sub, &s, Some(task), false, "ablate")?;
            let report = evaluate_checkpoint(&out.weights, out.tokenizer.as_ref(), task, a.trials, a.eval_seed, 1)?;
            Ok(Point {
                label,
                settings: s,
                key_tokens: key_tokens(&out.weights, out.tokenizer.as_ref(), task)?,
                partial: report.partial_rate,
                full: report.full_rate,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut csv = format!("{SWEEP_CSV_HEADER}\n");
    let mut table = Vec::new();
    for p in &results {
        let m = &p.settings.model;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            a.axis.name(),
            p.label,
            m.history_len + 1,
            m.num_blocks,
            m.split_block,
            m.context_token,
            p.key_tokens,
            p.partial,
            p.full
        ));
        table.push(vec![p.label.clone(), p.key_tokens.to_string(), format!("{:.2}", p.partial), format!("{:.2}", p.full)]);
    }
    fs::write(dir.join("sweep.csv"), csv)?;
    let config = json!({ "axis": a.axis.name(), "base": base.to_json(), "task": task.name(), "trials": a.trials, "eval_seed": a.eval_seed });
    RunManifest::new("ablate", config, base.train.seed, &[data])?.write(dir)?;
    print_table(&["setting", "key_tokens", "partial", "full"], &table);
    Ok(())
}
