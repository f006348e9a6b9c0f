//! Synthetic tasks whose correct action depends on what happened before the
//! current frame, with scripted experts, demonstration files, and
//! closed-loop evaluation.

mod dataset;
mod eval;
mod tasks;

pub use dataset::{
    expert_episode, generate_dataset, load_dataset, read_dataset, save_dataset, sidecar_path, write_dataset,
    Dataset, DatasetHeader, DemoStep, Demonstration, GenOptions, DATASET_MAGIC, DATASET_VERSION, DEFAULT_EPISODES,
};
pub use eval::{
    episode_seeds, evaluate_policy, run_episode, EpisodeTrace, ExpertPolicy, ModelPolicy, Policy, RandomPolicy,
    SuccessReport, DEFAULT_TRIALS,
};
pub use tasks::*;
