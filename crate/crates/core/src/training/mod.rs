//! Optimizer, learning-rate schedule, phase loops, checkpoints and LoRA.

mod lora;
mod optim;
mod phase;
mod schedule;

pub use lora::{load_labeled, lora_finetune, LabeledText, LoraAdapter, LoraMetrics, LoraSpec, LoraTrainConfig};
pub use optim::{adamw_step, adamw_step_map, clip_grad_norm, AdamWConfig, OptimState};
pub use phase::{
    load_checkpoint, reference_schedule, run_phase, save_checkpoint, select_best, validation_loss, PhaseConfig,
    PhaseData, PhaseKind, PhaseRecord, ValPoint, REFERENCE_BATCH_SIZE,
};
pub use schedule::{lr_at, scaled_warmup, Schedule};
