//! Flat TOML experiment configuration and the shipped presets.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DmtError, Result};
use crate::init::{InitPolicy, Ratio};
use crate::loss::{GammaPair, GammaScheduleSign};
use crate::nn::{Architecture, LrSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Classification,
    Segmentation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetId {
    TwoMoons,
    ToySeg,
    Cifar10,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingMode {
    FineTune,
    ReTrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    Cross,
    #[serde(rename = "self")]
    SelfPaired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaScheduleMode {
    /// Fixed `gamma1`/`gamma2` throughout.
    Constant,
    Positive,
    Negative,
}

impl GammaScheduleMode {
    pub fn sign(self) -> Option<GammaScheduleSign> {
        match self {
            GammaScheduleMode::Constant => None,
            GammaScheduleMode::Positive => Some(GammaScheduleSign::Positive),
            GammaScheduleMode::Negative => Some(GammaScheduleSign::Negative),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrScheduleId {
    Constant,
    Cosine,
    Poly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentationId {
    None,
    /// Gaussian feature jitter, for low-dimensional toy data.
    Jitter,
    /// One random image operation at random intensity, then cutout.
    RandomOp,
    /// Random scale, crop and horizontal flip on image and maps alike.
    ScaleCropFlip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitPolicyKind {
    DistinctSeeds,
    Pretrained,
    DifferenceMaximized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CbstSelection {
    /// Per-class top fraction by raw confidence.
    Direct,
    /// Class-wise threshold re-normalization.
    Renormalized,
}

fn default_true() -> bool {
    true
}

/// Every knob of an experiment. Unknown keys are rejected on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: Task,
    pub dataset: DatasetId,
    /// Samples generated for synthetic datasets; ignored for CIFAR-10.
    #[serde(default)]
    pub dataset_size: Option<usize>,
    /// Coordinate noise of the two-moons generator.
    #[serde(default = "defaults::moons_noise")]
    pub moons_noise: f64,
    /// Side length of toy segmentation images.
    #[serde(default = "defaults::grid")]
    pub grid: usize,
    /// Classes of the toy segmentation set, background included.
    #[serde(default = "defaults::seg_classes")]
    pub seg_classes: usize,
    /// Held-out evaluation samples generated for synthetic datasets.
    #[serde(default = "defaults::test_size")]
    pub test_size: usize,
    pub labeled_ratio: Ratio,
    #[serde(default = "defaults::valtiny")]
    pub valtiny_size: usize,

    pub gamma1: f64,
    pub gamma2: f64,
    #[serde(default = "defaults::gamma_schedule")]
    pub gamma_schedule: GammaScheduleMode,
    pub learning_rate: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub lr_schedule: LrScheduleId,
    #[serde(default = "defaults::poly_power")]
    pub poly_power: f64,
    pub training_mode: TrainingMode,
    pub epochs_per_iteration: usize,
    /// Epochs of full supervision; drives the baseline epoch rule.
    pub oracle_epochs: u32,
    /// Overrides the rule-derived baseline epochs when set.
    #[serde(default)]
    pub baseline_epochs: Option<u32>,
    pub batch_size: usize,
    /// `unlabeled:labeled`, e.g. `"7:1"`.
    pub batch_ratio: String,
    pub augmentation: AugmentationId,
    #[serde(default = "defaults::jitter")]
    pub jitter_std: f64,
    #[serde(default = "default_true")]
    pub cutout: bool,
    #[serde(default)]
    pub mixup: bool,
    #[serde(default = "defaults::mixup_alpha")]
    pub mixup_alpha: f64,
    /// Output size of the random crop for segmentation.
    #[serde(default)]
    pub crop_size: Option<usize>,
    #[serde(default = "defaults::alphas")]
    pub alphas: Vec<f64>,

    pub init_policy: InitPolicyKind,
    #[serde(default)]
    pub init_weights: Vec<String>,
    #[serde(default)]
    pub subset_size: Option<usize>,
    #[serde(default = "defaults::pairing")]
    pub pairing: Pairing,
    #[serde(default = "defaults::cbst_selection")]
    pub cbst_selection: CbstSelection,
    #[serde(default = "defaults::online_threshold")]
    pub online_threshold: f64,
    #[serde(default = "defaults::online_epochs")]
    pub online_epochs: usize,

    pub seeds: Vec<u64>,
    #[serde(default = "defaults::ema_decay")]
    pub ema_decay: f64,
    #[serde(default = "default_true")]
    pub eval_ema: bool,
    /// Hidden widths (MLP) or conv widths (CNN/FCN).
    pub widths: Vec<usize>,
    /// Run the two segmentation fine-tunings on separate threads.
    #[serde(default)]
    pub parallel: bool,
    /// Stop adding epochs to an iteration once this many seconds have passed.
    #[serde(default)]
    pub max_seconds_per_iteration: Option<f64>,
}

mod defaults {
    use super::*;

    pub fn moons_noise() -> f64 {
        0.1
    }
    pub fn grid() -> usize {
        64
    }
    pub fn seg_classes() -> usize {
        4
    }
    pub fn test_size() -> usize {
        1000
    }
    pub fn valtiny() -> usize {
        200
    }
    pub fn gamma_schedule() -> GammaScheduleMode {
        GammaScheduleMode::Constant
    }
    pub fn poly_power() -> f64 {
        0.9
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn jitter() -> f64 {
        0.05
    }
    pub fn mixup_alpha() -> f64 {
        1.0
    }
    pub fn alphas() -> Vec<f64> {
        vec![0.2, 0.4, 0.6, 0.8, 1.0]
    }
    pub fn pairing() -> Pairing {
        Pairing::Cross
    }
    pub fn cbst_selection() -> CbstSelection {
        CbstSelection::Direct
    }
    pub fn online_threshold() -> f64 {
        0.9
    }
    pub fn online_epochs() -> usize {
        20
    }
    pub fn ema_decay() -> f64 {
        0.999
    }
}

/// Shipped presets by name.
pub const PRESETS: [(&str, &str); 11] = [
    ("voc-1_8", include_str!("../presets/voc-1_8.toml")),
    ("voc-1_20", include_str!("../presets/voc-1_20.toml")),
    ("voc-1_50", include_str!("../presets/voc-1_50.toml")),
    ("voc-1_106", include_str!("../presets/voc-1_106.toml")),
    (
        "cityscapes-1_8",
        include_str!("../presets/cityscapes-1_8.toml"),
    ),
    (
        "cityscapes-1_30",
        include_str!("../presets/cityscapes-1_30.toml"),
    ),
    ("cifar10-4k", include_str!("../presets/cifar10-4k.toml")),
    ("cifar10-1k", include_str!("../presets/cifar10-1k.toml")),
    ("cifar10-desk", include_str!("../presets/cifar10-desk.toml")),
    ("moons", include_str!("../presets/moons.toml")),
    ("toyseg", include_str!("../presets/toyseg.toml")),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| DmtError::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            DmtError::config(format!(
                "unknown preset {name:?}; available: {}",
                preset_names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        Self::from_toml_str(text)
    }

    /// Loads a file path, or a preset name when no such file exists.
    pub fn load(path_or_preset: &str) -> Result<Self> {
        let path = Path::new(path_or_preset);
        if path.exists() {
            let text = std::fs::read_to_string(path)?;
            Self::from_toml_str(&text)
        } else {
            Self::preset(path_or_preset)
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn gammas(&self) -> GammaPair {
        GammaPair {
            gamma1: self.gamma1,
            gamma2: self.gamma2,
        }
    }

    /// Baseline epochs: the explicit override, or `round(sqrt(1/r) * oracle)`.
    pub fn resolved_baseline_epochs(&self) -> Result<u32> {
        match self.baseline_epochs {
            Some(e) => Ok(e),
            None => crate::metrics::baseline_epochs(self.labeled_ratio.value(), self.oracle_epochs),
        }
    }

    pub fn lr(&self) -> LrSchedule {
        match self.lr_schedule {
            LrScheduleId::Constant => LrSchedule::Constant,
            LrScheduleId::Cosine => LrSchedule::Cosine,
            LrScheduleId::Poly => LrSchedule::Poly {
                power: self.poly_power,
            },
        }
    }

    /// `(unlabeled, labeled)` parts of the batch ratio.
    pub fn ratio_parts(&self) -> Result<(usize, usize)> {
        parse_batch_ratio(&self.batch_ratio)
    }

    pub fn architecture(&self) -> Architecture {
        match (self.task, self.dataset) {
            (Task::Segmentation, _) => Architecture::Fcn {
                channels: 3,
                widths: self.widths.clone(),
                classes: self.seg_classes,
            },
            (_, DatasetId::Cifar10) => Architecture::SmallCnn {
                channels: 3,
                height: 32,
                width: 32,
                widths: self.widths.clone(),
                classes: 10,
            },
            _ => Architecture::Mlp {
                inputs: 2,
                hidden: self.widths.clone(),
                classes: 2,
            },
        }
    }

    /// The configured init policy made concrete for one seed.
    pub fn init_policy_for(&self, seed: u64) -> Result<InitPolicy> {
        Ok(match self.init_policy {
            InitPolicyKind::DistinctSeeds => InitPolicy::DistinctRandomSeeds {
                seed_a: crate::init::derive_seed(seed, "model-a", 0),
                seed_b: crate::init::derive_seed(seed, "model-b", 0),
            },
            InitPolicyKind::Pretrained => {
                let [a, b] = self.init_weights.as_slice() else {
                    return Err(DmtError::config(
                        "init_policy = \"pretrained\" needs exactly two init_weights",
                    ));
                };
                InitPolicy::DistinctPretrainedWeights {
                    weights_a: a.clone(),
                    weights_b: b.clone(),
                }
            }
            InitPolicyKind::DifferenceMaximized => InitPolicy::DifferenceMaximizedSubsets {
                seed: crate::init::derive_seed(seed, "shared-init", 0),
                k: self.subset_size,
            },
        })
    }

    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, msg: String| Err(DmtError::config(format!("{key}: {msg}")));
        let non_neg = |x: f64| x.is_finite() && x >= 0.0;
        if !non_neg(self.gamma1) {
            return err(
                "gamma1",
                format!("must be non-negative, got {}", self.gamma1),
            );
        }
        if !non_neg(self.gamma2) {
            return err(
                "gamma2",
                format!("must be non-negative, got {}", self.gamma2),
            );
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return err(
                "learning_rate",
                format!("must be positive, got {}", self.learning_rate),
            );
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err(
                "momentum",
                format!("must lie in [0, 1), got {}", self.momentum),
            );
        }
        if !non_neg(self.weight_decay) {
            return err("weight_decay", "must be non-negative".into());
        }
        if !(self.poly_power.is_finite() && self.poly_power > 0.0) {
            return err(
                "poly_power",
                format!("must be positive, got {}", self.poly_power),
            );
        }
        if self.epochs_per_iteration == 0 {
            return err("epochs_per_iteration", "must be positive".into());
        }
        if self.oracle_epochs == 0 {
            return err("oracle_epochs", "must be positive".into());
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be positive".into());
        }
        let (u, l) = self.ratio_parts()?;
        if l > 0 && self.batch_size * l < (u + l) {
            return err(
                "batch_ratio",
                format!(
                    "batch of {} cannot hold a labeled share of {l}/{}",
                    self.batch_size,
                    u + l
                ),
            );
        }
        if !non_neg(self.jitter_std) {
            return err("jitter_std", "must be non-negative".into());
        }
        if !(self.mixup_alpha.is_finite() && self.mixup_alpha > 0.0) {
            return err("mixup_alpha", "must be positive".into());
        }
        if self.mixup && self.task == Task::Segmentation {
            return err("mixup", "only applies to classification".into());
        }
        if self.alphas.is_empty() {
            return err("alphas", "needs at least one iteration".into());
        }
        if self.alphas.windows(2).any(|w| w[0] >= w[1])
            || self.alphas.iter().any(|&a| !(a > 0.0 && a <= 1.0))
            || *self.alphas.last().unwrap() != 1.0
        {
            return err(
                "alphas",
                format!(
                    "must be strictly increasing in (0, 1] and end at 1, got {:?}",
                    self.alphas
                ),
            );
        }
        if !(0.0..1.0).contains(&self.online_threshold) {
            return err("online_threshold", "must lie in [0, 1)".into());
        }
        if self.online_epochs == 0 {
            return err("online_epochs", "must be positive".into());
        }
        if self.seeds.is_empty() {
            return err("seeds", "needs at least one seed".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return err("ema_decay", "must lie in [0, 1]".into());
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return err("widths", "needs at least one positive width".into());
        }
        if !(self.moons_noise.is_finite() && self.moons_noise >= 0.0) {
            return err("moons_noise", "must be non-negative".into());
        }
        if self.task == Task::Segmentation {
            if self.seg_classes < 2 {
                return err("seg_classes", "needs background plus one class".into());
            }
            if self.dataset != DatasetId::ToySeg {
                return err("dataset", "segmentation runs on toy-seg".into());
            }
        } else if self.dataset == DatasetId::ToySeg {
            return err("dataset", "toy-seg is a segmentation dataset".into());
        }
        if let Some(s) = self.max_seconds_per_iteration {
            if !(s.is_finite() && s > 0.0) {
                return err("max_seconds_per_iteration", "must be positive".into());
            }
        }
        if let Some(0) = self.subset_size {
            return err("subset_size", "must be positive".into());
        }
        if self.init_policy == InitPolicyKind::Pretrained && self.init_weights.len() != 2 {
            return err(
                "init_weights",
                "pretrained init needs exactly two ids".into(),
            );
        }
        Ok(())
    }
}

/// Parses `"u:l"` into `(unlabeled, labeled)` parts.
pub fn parse_batch_ratio(s: &str) -> Result<(usize, usize)> {
    let bad = || {
        DmtError::config(format!(
            "batch_ratio: cannot parse {s:?}; expected e.g. \"7:1\""
        ))
    };
    let (u, l) = s.split_once(':').ok_or_else(bad)?;
    let u: usize = u.trim().parse().map_err(|_| bad())?;
    let l: usize = l.trim().parse().map_err(|_| bad())?;
    if u + l == 0 {
        return Err(bad());
    }
    Ok((u, l))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_loads() {
        for name in preset_names() {
            let cfg = ExperimentConfig::preset(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(cfg.name, name);
        }
    }

    #[test]
    fn table_rows() {
        let voc = ExperimentConfig::preset("voc-1_8").unwrap();
        assert_eq!((voc.gamma1, voc.gamma2), (5.0, 5.0));
        assert_eq!(voc.ratio_parts().unwrap(), (7, 1));
        assert_eq!(voc.batch_size, 8);
        assert_eq!(voc.training_mode, TrainingMode::FineTune);
        let cifar = ExperimentConfig::preset("cifar10-4k").unwrap();
        assert_eq!((cifar.gamma1, cifar.gamma2), (4.0, 4.0));
        assert_eq!(cifar.ratio_parts().unwrap(), (7, 1));
        assert_eq!(cifar.training_mode, TrainingMode::ReTrain);
        assert_eq!(
            ExperimentConfig::preset("cifar10-1k")
                .unwrap()
                .ratio_parts()
                .unwrap(),
            (31, 1)
        );
        let city = ExperimentConfig::preset("cityscapes-1_8").unwrap();
        assert_eq!((city.gamma1, city.learning_rate), (3.0, 4e-3));
        assert_eq!(city.ratio_parts().unwrap(), (3, 1));
    }

    #[test]
    fn negative_gamma_rejected() {
        let text = include_str!("../presets/moons.toml").replace("gamma1 = ", "gamma1 = -1 #");
        match ExperimentConfig::from_toml_str(&text) {
            Err(DmtError::Config(msg)) => assert!(msg.starts_with("gamma1")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_and_missing_keys_rejected() {
        let base = include_str!("../presets/moons.toml");
        let extra = format!("{base}\nsurprise = 1\n");
        assert!(ExperimentConfig::from_toml_str(&extra).is_err());
        let missing: String = base
            .lines()
            .filter(|l| !l.starts_with("gamma2"))
            .map(|l| format!("{l}\n"))
            .collect();
        let e = ExperimentConfig::from_toml_str(&missing).unwrap_err();
        assert!(e.to_string().contains("gamma2"), "{e}");
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = ExperimentConfig::preset("moons").unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.learning_rate *= 2.0;
        assert_ne!(a.hash(), b.hash());
        let round: ExperimentConfig = toml::from_str(&a.to_toml()).unwrap();
        assert_eq!(round, a);
    }
}
