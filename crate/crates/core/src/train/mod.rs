//! Training, evaluation metrics, checkpoints and the experiment runners.

pub mod checkpoint;
pub mod experiments;
pub mod metrics;
pub mod taps;
pub mod trainer;

pub use checkpoint::{load_checkpoint, load_encoder, save_checkpoint, Checkpoint, TensorRecord};
pub use taps::TapCache;
pub use metrics::{accuracy, auc_macro_ovr, binary_auc, brute_force_auc, AucReport, Metrics};
pub use trainer::{
    evaluate, evaluate_cached, predict, run_experiment, train, trainable_params_digest, EpochMetrics, ExperimentRecord, HyperParams,
    RunData, TrainFailure, TrainOutcome,
};
