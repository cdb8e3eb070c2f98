//! Constrained Adam training of the insert parameters.

mod adam;
mod config;
mod constraints;
mod mix;
pub mod rotation_demo;
mod schedule;
mod train;

pub use adam::AdamState;
pub use config::{LrSchedule, Mode, TrainConfig};
pub use constraints::{enforce_constraints, wrap_angle, ConstraintReport};
pub use mix::{mix_inserts, InsertPair};
pub use schedule::lr_at;
pub use train::{
    batch_objective, build_inserts, clip_grads, evaluate_objective, train_batch, train_batch_with,
    train_promptwise, train_promptwise_with, EpochRecord, Evaluation, RunMetrics, StepEvent,
    TrainFailure, TrainOutcome,
};
