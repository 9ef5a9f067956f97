//! Dynamic mutual training: pseudo-label training where the disagreement
//! between two models re-weights the loss.

pub mod config;
pub mod data;
pub mod error;
pub mod init;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod prob;
pub mod pseudo_label;
pub mod runlog;
pub mod trainer;

pub use config::ExperimentConfig;
pub use error::{DmtError, Result};
pub use loss::{
    combined_loss, cross_entropy, dynamic_weight, dynamic_weight_map, entropy, gamma_schedule,
    labeled_loss, mixup_batch, unlabeled_loss, DynamicWeightResult, GammaPair, LossBreakdown,
    WeightCase,
};
pub use metrics::{
    accuracy, baseline_epochs, ema_update, fine_grained_score, mean_iou, ConfusionMatrix, EmaState,
};
pub use prob::{ProbabilityMap, ProbabilityVector};
pub use pseudo_label::{PseudoLabelMap, PseudoLabelRecord, SelectionPolicy, IGNORE_LABEL};
pub use runlog::{ModelMetrics, RunRecord, RunStore};
pub use trainer::{
    run_ablation, AblationVariant, BatchComposition, IterationSchedule, Prepared, RunOptions,
    RunOutput,
};
