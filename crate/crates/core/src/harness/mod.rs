//! Training loop, AP50 evaluation, prediction dumps and ablation drivers.

mod ablation;
mod config;
mod eval;
mod train;

pub use ablation::{ablate_encoders, ablate_top_k, AblationResult, AblationRow, EncoderDataset};
pub use config::{select_top_k, top_k_indices, RunConfig};
pub use eval::{
    evaluate, evaluate_dir, predict, write_predictions, EvalReport, Prediction, SamplePrediction,
};
pub use train::{
    epoch_log_csv, fit, train, write_epoch_log, EpochRecord, TrainOutcome, EPOCH_LOG_HEADER,
};
