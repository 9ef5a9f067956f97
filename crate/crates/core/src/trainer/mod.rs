//! Training loops and the iterative pseudo-labeling runners.

mod augment;
mod batch;
mod classify;
mod experiment;
mod segment;
mod step;
mod train;

pub use augment::{flip_horizontal, ClassAugment, ImageOp, SegAugment, SegSample};
pub use batch::{BatchComposition, BatchSampler, BatchSlot, Source};
pub use classify::run_dmt_classification;
pub use experiment::{
    eval_classifier, eval_segmenter, predictions, probability_maps, probability_vectors,
    segmentation_confusion, AblationVariant, Dataset, IterationSchedule, Prepared, RunOptions,
    RunOutput,
};
pub use segment::run_dmt_segmentation;
pub use step::{
    classification_step, segmentation_step, CaseCounts, ClassItem, LossRecipe, MixupDraw,
    PixelSource, StepTrace, WeightedTarget,
};
pub use train::{
    train_classifier, train_segmenter, PoolItem, SegPoolItem, TrainOutcome, TrainSpec,
};

use crate::config::{ExperimentConfig, Task};
use crate::error::Result;
use crate::runlog::RunStore;

/// Runs one variant for one seed with the runner matching the task.
pub fn run_ablation(
    variant: AblationVariant,
    cfg: &ExperimentConfig,
    seed: u64,
    prep: &Prepared,
    store: &mut RunStore,
    opts: &RunOptions,
) -> Result<RunOutput> {
    match cfg.task {
        Task::Classification => run_dmt_classification(cfg, variant, seed, prep, store, opts),
        Task::Segmentation => run_dmt_segmentation(cfg, variant, seed, prep, store, opts),
    }
}
