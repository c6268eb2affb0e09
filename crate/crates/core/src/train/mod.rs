// SPDX-License-Identifier: Apache-2.0

//! Supervised training for relative pose estimation from memory.

pub mod batch;
pub mod checkpoint;
mod config;
pub mod optim;
pub mod run;

pub use batch::{assemble, sample_batch, sample_length, sample_mask};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, CheckpointMeta};
pub use config::TrainConfig;
pub use optim::{clip_global_norm, AdamW, Schedule};
pub use run::{parse_log_line, train, train_step, LogRecord, StepStats, TrainOutcome, TrainRequest};
