//! Training, schedules, checkpoints, configuration and evaluation reports.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod diagnostics;
pub mod report;
pub mod schedule;
pub mod train;

pub use checkpoint::{checkpoint_id, load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint};
pub use config::{LossWeights, Task, TrainConfig};
pub use schedule::{lr_schedule, Decay};
pub use train::{finetune_retrieval, finetune_vcr, pretrain, run_training, Optimizer, RunLog, StepRecord, TrainOutcome};
