//! Dual-decoding objective, training loop, evaluation and checkpoint state.

mod config;
mod loss;
mod run;
mod trainer;

pub use config::TrainConfig;
pub use loss::{lambda_schedule, loss_dual, LossOptions, LossTerms, LossWeights, ScheduleConfig};
pub use run::{
    format_log_row, load_corpus, run_training, snapshot_name, RunOptions, RunSummary, CHECKPOINT_NAME,
    LOG_HEADER, LOG_NAME,
};
pub use trainer::{
    encode_sequence, evaluate, load_state, state_tensors, CheckpointState, SequenceCodes, StepMetrics,
    Trainer,
};
