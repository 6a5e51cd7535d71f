//! Synthetic workloads and a small training loop for comparing precision
//! plans over many steps.

mod batches;
mod config;
mod train;
mod trial;
mod workload;

pub use batches::{batches_from_container, batches_to_container, record_batches, replay_batches};
pub use config::{evaluate_assertions, AssertionOutcome, ExperimentConfig};
pub use train::{
    batch_digest, clip_global_norm, run_arm, run_experiment, run_experiment_on, train_step, AdamW,
    Arm, ArmReport, ComparisonReport, LrSchedule, Moments, StepOutput, TrainSettings, TrainState,
    WEIGHT_NAMES,
};
pub use trial::{tie_trial, TieTrial};
pub use workload::*;
