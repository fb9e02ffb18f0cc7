//! Staged training: optimizer, batch schedules, stages and paradigms, and
//! toy backbone pretraining.

pub mod optim;
pub mod paradigm;
pub mod pretrain;
pub mod schedule;
pub mod stage;

pub use optim::{clip_global_norm, AdamW, AdamWConfig};
pub use paradigm::{run_paradigm, EpochBudget, Paradigm, ParadigmConfig, ParadigmRun};
pub use pretrain::{toy_pretrain, PretrainConfig, PretrainKind, PretrainOutcome};
pub use schedule::{compose_batch, round_robin_task, sample_task, Batch, BatchItem, ScheduleKind};
pub use stage::{batch_gradients, run_stage, FreezeSpec, StageConfig, StageKind, StageRun, StepRecord};
