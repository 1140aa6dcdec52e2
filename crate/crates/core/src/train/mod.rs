//! Training strategies: meta-transfer learning, joint training and
//! fine-tuning schedules.

mod finetune;
mod meta;
mod state;

pub use finetune::{
    fine_tune, lm_fine_tune_schedule, mean_nll, run_schedule, EpochRecord, FineTuneOutcome, Schedule, ScheduleTracker,
};
pub use meta::{
    inner_adapt, joint_step, joint_step_with_batch, loss_fn, meta_gradient, meta_step, meta_step_with_batches,
    source_tasks, value_and_grad, MetaHyper, MetaMode, Sampling, StepDiag, TaskDiag, ValPool,
};
pub use state::{apply_update, sum_grads, OptKind, OptState, OuterConfig, TrainState};
