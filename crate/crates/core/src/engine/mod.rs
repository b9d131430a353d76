//! Training, evaluation and ablation runs.

mod ablation;
mod config;
mod eval;
mod train;

pub use ablation::{
    run_ablation, AblationMatrix, AblationReport, AblationRow, Cell, SETTINGS_TABLE, SETTING_FOR_STRATEGIES, STRATEGIES_TABLE,
    STRATEGY_FOR_SETTINGS,
};
pub use config::{Setting, TrainConfig};
pub use eval::{evaluate, evaluate_detections, interpolated_ap, mean_pair_cosine, predict_dataset, EvalConfig, EvalReport};
pub use train::{clip_grad_norm, collate, train, StepMetrics, TrainOutcome, DIAGNOSTIC_FILE, FINAL_CHECKPOINT, METRICS_FILE};
