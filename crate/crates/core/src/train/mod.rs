//! Behaviour cloning: window sampling from demonstrations, AdamW with
//! warmup and cosine decay, and the training loop.

mod data;
mod optim;
mod trainer;

pub use data::{action_scale, all_chunks, check_dataset, sample_window, window_at, Window};
pub use optim::{adamw_step, grad_norm, lr_schedule, AdamState, TrainConfig};
pub use trainer::{
    batch_loss, batch_loss_grads, decoder_for, draw_batch, fit_tokenizer, frozen_mask, tokenizer_path, train_bc,
    train_step, window_loss_on, Batch, EvalRow, EvalSpec, LogRow, Target, TrainOptions, TrainOutcome, LOSS_CSV_HEADER,
};
