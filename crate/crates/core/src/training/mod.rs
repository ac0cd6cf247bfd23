//! Pretraining, fine-tuning and evaluation loops with the Adafactor optimizer.

pub mod adafactor;
mod config;
pub mod data;
pub mod eval;
pub mod span;
mod trainer;

pub use adafactor::{factored_second_moment, Adafactor, AdafactorState, Moments};
pub use config::{Selection, TrainConfig};
pub use data::{build_batch, encode_examples, Batcher, Item};
pub use eval::{evaluate, evaluate_items, sequence_log_likelihoods, Evaluation, Predictions};
pub use span::{reconstruct, span_corrupt, Corrupted};
pub use trainer::{
    finetune, loss_and_gradients, pretrain, pretraining_chunks, write_history, FinetuneRun, HistoryRow, PretrainRun,
    Trainer,
};
