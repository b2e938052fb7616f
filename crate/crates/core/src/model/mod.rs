//! The decoder-only transformer, its optimizer and training/decoding loops.

mod config;
mod generate;
mod optim;
pub mod params;
mod schedule;
mod tokenizer;
mod train;
mod transformer;

pub use config::ModelConfig;
pub use generate::{generate_greedy, truncate_prompt, GenerationLimits};
pub use optim::{AdamWConfig, OptimizerState, ParamStore};
pub use params::Parameters;
pub use schedule::{
    reference_setting, LrSchedule, ReferenceSetting, ScheduleKind, REFERENCE_SETTINGS,
};
pub use tokenizer::{Example, Tokenizer, IGNORE_INDEX};
pub use train::{train_loop, train_sft, LogEntry, TrainConfig, TrainLog};
pub use transformer::{
    backward_into, batch_loss, forward, forward_logits, forward_step, lora_a_name, lora_b_name,
    loss_and_grads, AdapterView, ForwardCache, FreezeView, Grads, KvCache, Weights,
};
