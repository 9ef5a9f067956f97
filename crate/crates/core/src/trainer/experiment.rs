use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{ClassAugment, SegAugment};
use super::batch::BatchComposition;
use super::step::{LossRecipe, StepTrace};
use super::train::{TrainOutcome, TrainSpec};
use crate::config::{AugmentationId, DatasetId, ExperimentConfig, Task};
use crate::data::{
    cifar_to_data, generate_toy_segmentation, generate_two_moons, ingest_cifar10,
    ClassificationData, SegmentationData, ToySegOptions, CIFAR_SIDE,
};
use crate::error::{DmtError, Result};
use crate::init::{derive_seed, make_split, SplitSpec};
use crate::metrics::{accuracy, argmax_map, fine_grained_score, mean_iou, ConfusionMatrix};
use crate::nn::Network;
use crate::prob::{ProbabilityMap, ProbabilityVector};
use crate::pseudo_label::Prediction;
use crate::runlog::{ModelMetrics, RunRecord};

/// Curriculum of pseudo-labeled fractions, one per iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSchedule {
    alphas: Vec<f64>,
}

impl IterationSchedule {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(DmtError::config("alphas: schedule is empty"));
        }
        if alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(DmtError::config(format!(
                "alphas: every fraction must lie in (0, 1], got {alphas:?}"
            )));
        }
        if alphas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DmtError::config(format!(
                "alphas: must be strictly increasing, got {alphas:?}"
            )));
        }
        if *alphas.last().unwrap() != 1.0 {
            return Err(DmtError::config("alphas: the last fraction must be 1.0"));
        }
        Ok(IterationSchedule { alphas })
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn iterations(&self) -> usize {
        self.alphas.len()
    }
}

/// Training strategies compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    Dmt,
    /// Live pseudo labels above a fixed threshold, plain cross-entropy.
    OnlineSt,
    /// Iterative class-balanced selection with unit weights.
    Cbst,
    /// One model fine-tuning itself with the dynamic loss.
    Dst,
    DmtNaive,
    DmtFlip,
    /// Top-fraction curriculum with unit weights and re-training.
    CurriculumLabeling,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 7] = [
        AblationVariant::Dmt,
        AblationVariant::OnlineSt,
        AblationVariant::Cbst,
        AblationVariant::Dst,
        AblationVariant::DmtNaive,
        AblationVariant::DmtFlip,
        AblationVariant::CurriculumLabeling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Dmt => "dmt",
            AblationVariant::OnlineSt => "online-st",
            AblationVariant::Cbst => "cbst",
            AblationVariant::Dst => "dst",
            AblationVariant::DmtNaive => "dmt-naive",
            AblationVariant::DmtFlip => "dmt-flip",
            AblationVariant::CurriculumLabeling => "cl",
        }
    }

    /// Loss recipe for stored pseudo labels.
    pub fn recipe(self, cfg: &ExperimentConfig) -> LossRecipe {
        match self {
            AblationVariant::Dmt | AblationVariant::Dst => LossRecipe::Dynamic(cfg.gammas()),
            AblationVariant::DmtFlip => LossRecipe::Flip(cfg.gammas()),
            AblationVariant::DmtNaive => LossRecipe::Naive,
            AblationVariant::Cbst | AblationVariant::CurriculumLabeling => LossRecipe::Unit,
            AblationVariant::OnlineSt => LossRecipe::Online {
                threshold: cfg.online_threshold,
            },
        }
    }

    /// Variants whose gamma may ramp when a model is re-trained from scratch;
    /// ablations keep it constant.
    pub fn scheduled_gamma(self) -> bool {
        matches!(self, AblationVariant::Dmt | AblationVariant::Dst)
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = DmtError;

    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = AblationVariant::ALL.iter().map(|v| v.name()).collect();
                DmtError::config(format!("unknown variant {s:?}; expected one of {names:?}"))
            })
    }
}

/// Extra behavior for one run beyond the config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Return every step trace in [`RunOutput::traces`].
    pub keep_traces: bool,
    /// Recipe evaluated alongside the real one on every batch.
    pub shadow: Option<LossRecipe>,
    /// Stop after supervised iteration 0.
    pub baseline_only: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub variant: Option<AblationVariant>,
    pub seed: u64,
    /// Iteration-0 record of each model.
    pub baseline: Vec<RunRecord>,
    /// Records of the later iterations, in order.
    pub iterations: Vec<RunRecord>,
    /// The returned model: `F` of the last iteration, or the better of the
    /// final pair on valtiny.
    pub final_model: Network,
    pub final_label: String,
    pub final_metrics: ModelMetrics,
    /// `(run-iteration-model, traces)` when requested.
    pub traces: Vec<(String, Vec<StepTrace>)>,
}

#[derive(Debug, Clone)]
pub enum Dataset {
    Classification {
        train: ClassificationData,
        test: ClassificationData,
    },
    Segmentation {
        train: SegmentationData,
        test: SegmentationData,
    },
}

/// Train/test data plus the labeled/unlabeled/valtiny partition of `train`.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub split: SplitSpec,
}

impl Prepared {
    /// Generates or ingests the configured dataset for one seed and splits
    /// it. `split` replaces the generated partition when given.
    pub fn load(
        cfg: &ExperimentConfig,
        seed: u64,
        data_dir: Option<&Path>,
        split: Option<SplitSpec>,
    ) -> Result<Self> {
        let data_seed = derive_seed(seed, "data", 0);
        let test_seed = derive_seed(seed, "data", 1);
        let dataset = match cfg.dataset {
            DatasetId::TwoMoons => {
                let n = cfg.dataset_size.unwrap_or(1000);
                Dataset::Classification {
                    train: generate_two_moons(n, cfg.moons_noise, data_seed)?,
                    test: generate_two_moons(cfg.test_size, cfg.moons_noise, test_seed)?,
                }
            }
            DatasetId::ToySeg => {
                let n = cfg.dataset_size.unwrap_or(400);
                let opts = ToySegOptions::default();
                let (train, _) =
                    generate_toy_segmentation(n, cfg.grid, cfg.seg_classes, data_seed, &opts)?;
                let (test, _) = generate_toy_segmentation(
                    cfg.test_size,
                    cfg.grid,
                    cfg.seg_classes,
                    test_seed,
                    &opts,
                )?;
                Dataset::Segmentation { train, test }
            }
            DatasetId::Cifar10 => {
                let dir = data_dir
                    .ok_or_else(|| DmtError::config("CIFAR-10 needs --data-dir or DMT_DATA_DIR"))?;
                let raw = ingest_cifar10(dir)?;
                let mut train = raw.train;
                if let Some(n) = cfg.dataset_size.filter(|&n| n < train.len()) {
                    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
                    train.shuffle(&mut rng);
                    train.truncate(n);
                }
                let test = &raw.test[..cfg.test_size.min(raw.test.len())];
                Dataset::Classification {
                    train: cifar_to_data(&train),
                    test: cifar_to_data(test),
                }
            }
        };
        Prepared::from_dataset(cfg, seed, dataset, split)
    }

    /// Splits already-built data.
    pub fn from_dataset(
        cfg: &ExperimentConfig,
        seed: u64,
        dataset: Dataset,
        split: Option<SplitSpec>,
    ) -> Result<Self> {
        let n = match &dataset {
            Dataset::Classification { train, .. } => train.len(),
            Dataset::Segmentation { train, .. } => train.len(),
        };
        let split = match split {
            Some(s) => {
                s.validate()?;
                if let Some(&bad) = s
                    .labeled_ids
                    .iter()
                    .chain(&s.unlabeled_ids)
                    .chain(&s.valtiny_ids)
                    .find(|&&i| i >= n)
                {
                    return Err(DmtError::Index { index: bad, len: n });
                }
                s
            }
            None => {
                let labels = match &dataset {
                    Dataset::Classification { train, .. } => train.labels.clone(),
                    Dataset::Segmentation { train, .. } => train.dominant_classes(),
                };
                make_split(&labels, cfg.labeled_ratio, cfg.valtiny_size, seed)?
            }
        };
        if split.labeled_ids.is_empty() {
            return Err(DmtError::config(
                "labeled_ratio: the split has no labeled samples",
            ));
        }
        Ok(Prepared { dataset, split })
    }

    pub fn task(&self) -> Task {
        match self.dataset {
            Dataset::Classification { .. } => Task::Classification,
            Dataset::Segmentation { .. } => Task::Segmentation,
        }
    }
}

/// Probabilities as validated vectors, renormalized in double precision.
pub fn probability_vectors(
    net: &Network,
    data: &ClassificationData,
    ids: &[usize],
) -> Result<Vec<ProbabilityVector>> {
    let probs = net.predict_proba_rows(data.rows(ids).view())?;
    probs
        .rows()
        .into_iter()
        .map(|row| {
            let v: Vec<f64> = row.iter().map(|&p| p as f64).collect();
            let total: f64 = v.iter().sum();
            ProbabilityVector::new(v.into_iter().map(|p| p / total).collect())
        })
        .collect()
}

/// Predictions on `ids`, identified by their index in the training set.
pub fn predictions(
    net: &Network,
    data: &ClassificationData,
    ids: &[usize],
) -> Result<Vec<Prediction>> {
    Ok(probability_vectors(net, data, ids)?
        .into_iter()
        .zip(ids)
        .map(|(probs, id)| Prediction {
            sample_id: id.to_string(),
            probs,
        })
        .collect())
}

/// Dense probability maps for the images `ids`.
pub fn probability_maps(
    net: &Network,
    data: &SegmentationData,
    ids: &[usize],
) -> Result<Vec<ProbabilityMap>> {
    const CHUNK: usize = 32;
    let (h, w) = (data.height(), data.width());
    let classes = net.classes();
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(CHUNK) {
        let images = data.images.select(Axis(0), chunk);
        let probs = net.predict_proba_images(images.view())?;
        for (k, &id) in chunk.iter().enumerate() {
            let v = probs.slice(s![k, .., .., ..]).iter().copied().collect();
            out.push(ProbabilityMap::new(id.to_string(), classes, h, w, v)?);
        }
    }
    Ok(out)
}

/// Test accuracy and fine-grained score.
pub fn eval_classifier(net: &Network, data: &ClassificationData) -> Result<(f64, f64)> {
    let ids: Vec<usize> = (0..data.len()).collect();
    let probs = probability_vectors(net, data, &ids)?;
    Ok((
        accuracy(&probs, &data.labels)?,
        fine_grained_score(&probs, &data.labels)?,
    ))
}

/// Confusion matrix of argmax predictions over the images `ids`.
pub fn segmentation_confusion(
    net: &Network,
    data: &SegmentationData,
    ids: &[usize],
) -> Result<ConfusionMatrix> {
    let (h, w) = (data.height(), data.width());
    let mut cm = ConfusionMatrix::new(net.classes());
    for chunk in ids.chunks(32) {
        let images = data.images.select(Axis(0), chunk);
        let probs = net.predict_proba_images(images.view())?;
        for (k, &id) in chunk.iter().enumerate() {
            let flat: Vec<f32> = probs.slice(s![k, .., .., ..]).iter().copied().collect();
            let pred = argmax_map(&flat, net.classes(), h * w);
            cm.add_map(&data.masks[id], &pred)?;
        }
    }
    Ok(cm)
}

pub fn eval_segmenter(net: &Network, data: &SegmentationData, ids: &[usize]) -> Result<f64> {
    mean_iou(&segmentation_confusion(net, data, ids)?)
}

pub(crate) fn class_augment(cfg: &ExperimentConfig) -> ClassAugment {
    match cfg.augmentation {
        AugmentationId::None | AugmentationId::ScaleCropFlip => ClassAugment::None,
        AugmentationId::Jitter => ClassAugment::Jitter {
            std: cfg.jitter_std as f32,
        },
        AugmentationId::RandomOp => ClassAugment::RandomOp {
            channels: 3,
            height: CIFAR_SIDE,
            width: CIFAR_SIDE,
            cutout: cfg.cutout,
        },
    }
}

pub(crate) fn seg_augment(cfg: &ExperimentConfig) -> SegAugment {
    match cfg.augmentation {
        AugmentationId::ScaleCropFlip => SegAugment::standard(cfg.crop_size),
        _ => SegAugment::identity(),
    }
}

pub(crate) fn train_spec(
    cfg: &ExperimentConfig,
    epochs: usize,
    composition: BatchComposition,
    recipe: LossRecipe,
    scheduled_gamma: bool,
    opts: &RunOptions,
) -> TrainSpec {
    TrainSpec {
        epochs,
        composition,
        learning_rate: cfg.learning_rate,
        lr_schedule: cfg.lr(),
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        recipe,
        gamma_schedule: if scheduled_gamma {
            cfg.gamma_schedule.sign()
        } else {
            None
        },
        shadow: opts.shadow,
        mixup_alpha: (cfg.mixup && cfg.task == Task::Classification).then_some(cfg.mixup_alpha),
        ema_decay: cfg.eval_ema.then_some(cfg.ema_decay),
        max_seconds: cfg.max_seconds_per_iteration,
    }
}

/// Supervised batches: up to `batch_size` labeled samples, no pseudo labels.
pub(crate) fn supervised_composition(
    cfg: &ExperimentConfig,
    labeled: usize,
) -> Result<BatchComposition> {
    BatchComposition::new(cfg.batch_size.min(labeled).max(1), 0)
}

pub(crate) fn mixed_composition(cfg: &ExperimentConfig) -> Result<BatchComposition> {
    let (u, l) = cfg.ratio_parts()?;
    BatchComposition::from_ratio(cfg.batch_size, u, l)
}

/// Fills the training bookkeeping fields of `m` from an outcome.
pub(crate) fn record_outcome(m: &mut ModelMetrics, out: &TrainOutcome) {
    m.cases = out.cases;
    m.steps = out.steps;
    m.epochs = out.epochs;
    let per_epoch = (out.steps as usize / out.epochs.max(1)).max(1);
    let tail = &out.traces[out.traces.len().saturating_sub(per_epoch)..];
    m.final_loss = if tail.is_empty() {
        0.0
    } else {
        tail.iter().map(|t| t.loss).sum::<f64>() / tail.len() as f64
    };
}

pub(crate) fn trace_key(run: &str, iteration: u32, model: &str) -> String {
    format!("{run}-i{iteration}-{model}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_rules() {
        assert!(IterationSchedule::new(vec![0.2, 0.4, 0.6, 0.8, 1.0]).is_ok());
        assert!(IterationSchedule::new(vec![1.0]).is_ok());
        assert!(IterationSchedule::new(vec![0.4, 0.2, 1.0]).is_err());
        assert!(IterationSchedule::new(vec![0.2, 0.5]).is_err());
        assert!(IterationSchedule::new(vec![]).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in AblationVariant::ALL {
            assert_eq!(v.name().parse::<AblationVariant>().unwrap(), v);
        }
        assert!("mean-teacher".parse::<AblationVariant>().is_err());
    }

    #[test]
    fn naive_and_flip_recipes() {
        let mut cfg = ExperimentConfig::preset("moons").unwrap();
        cfg.gamma2 = 2.0;
        // case 3 sample: y_A = 0 with c_A = 0.6, trained model prefers 1 at 0.8
        let p_b = [0.2, 0.8];
        let naive = AblationVariant::DmtNaive
            .recipe(&cfg)
            .pseudo_target(0, 0.6, &p_b);
        assert!((naive.weight - 0.2).abs() < 1e-12);
        let flip = AblationVariant::DmtFlip
            .recipe(&cfg)
            .pseudo_target(0, 0.6, &p_b);
        assert_eq!(flip.target, Some(1));
        assert!((flip.weight - 0.16).abs() < 1e-12);
        let dmt = AblationVariant::Dmt
            .recipe(&cfg)
            .pseudo_target(0, 0.6, &p_b);
        assert_eq!(dmt.weight, 0.0);
    }
}
