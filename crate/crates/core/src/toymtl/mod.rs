//! Desk-scale stand-in for a pretrained encoder: synthetic tasks, a tiny
//! transformer with hand-written backprop, warm-up training, per-head
//! gradient accumulation, and a multi-task evaluator.

pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod grads;
pub mod model;
pub mod train;

use thiserror::Error;

pub use config::{derive_seed, ToyModelConfig, TrainRecipe};
pub use data::{gen_synthetic_suite, Instance, Label, Suite, SyntheticTaskSpec, TaskDataset};
pub use eval::ToyEvaluator;
pub use gradcheck::{gradient_check, GradCheckReport};
pub use grads::{accumulate_instance_gradients, accumulate_task_gradients};
pub use model::{Model, Prediction};
pub use train::{train_single_task, TrainSummary};

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("invalid task spec {task_id:?}: {reason}")]
    InvalidSpec { task_id: String, reason: String },
    #[error("duplicate task id {0:?}")]
    DuplicateTask(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("task {0:?} has no instances")]
    EmptyDataset(String),
    #[error("no training data left for primary {0:?}")]
    EmptyPool(String),
    #[error("task {task_id:?} instance {instance_id:?}: {reason}")]
    BadInstance {
        task_id: String,
        instance_id: String,
        reason: String,
    },
    #[error("task {task_id:?} does not fit the model: {reason}")]
    HeadMismatch { task_id: String, reason: String },
    #[error("training on {task_id:?} diverged (non-finite loss) at step {step}")]
    Divergence { task_id: String, step: usize },
    #[error("parameter index {index} out of range for {len} parameters")]
    ParamIndex { index: usize, len: usize },
    #[error("cannot parse {what}: {reason}")]
    Parse { what: String, reason: String },
    #[error(transparent)]
    Rank(#[from] crate::ranker::RankError),
    #[error(transparent)]
    Store(#[from] crate::gradstore::StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
