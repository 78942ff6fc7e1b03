//! Cold start, joint LM + contrastive training under the three supervision
//! modes, AdamW, and checkpointing.

mod config;
mod optim;
mod run;
mod step;

pub use config::{AdamWConfig, SupervisionMode, TrainConfig};
pub use optim::{OptimizerState, OPTIMIZER_MAGIC};
pub use run::{
    cold_start, epoch_batches, resume_training, run_training, steps_per_epoch, write_file,
    CheckpointPolicy, TraceRecord, TrainOutcome, TrainState, TrainTrace,
};
pub use step::{build_query_forward, compute_step, plan_anchor, train_step, QueryPlan, StepGrads};
