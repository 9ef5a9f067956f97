//! Evaluation metrics, parameter EMA and the baseline epoch rule.

use serde::{Deserialize, Serialize};

use crate::error::{DmtError, Result};
use crate::prob::{argmax, ProbabilityVector};
use crate::pseudo_label::IGNORE_LABEL;

/// Fraction of samples whose argmax matches the ground truth.
pub fn accuracy(predictions: &[ProbabilityVector], ground_truth: &[usize]) -> Result<f64> {
    check_aligned(predictions.len(), ground_truth.len())?;
    let correct = predictions
        .iter()
        .zip(ground_truth)
        .filter(|(p, &y)| p.argmax() == y)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Accuracy where each correct sample counts its probability on the true
/// class instead of 1.
pub fn fine_grained_score(
    predictions: &[ProbabilityVector],
    ground_truth: &[usize],
) -> Result<f64> {
    check_aligned(predictions.len(), ground_truth.len())?;
    let mut total = 0.0;
    for (p, &y) in predictions.iter().zip(ground_truth) {
        if p.argmax() == y {
            total += p.get(y)?;
        }
    }
    Ok(total / predictions.len() as f64)
}

fn check_aligned(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(DmtError::validation(format!(
            "{a} predictions but {b} ground-truth labels"
        )));
    }
    if a == 0 {
        return Err(DmtError::validation("no samples to score"));
    }
    Ok(())
}

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(DmtError::validation("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix {
            classes,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(DmtError::Index {
                index: truth.max(pred),
                len: self.classes,
            });
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    /// Accumulates a label map against predictions; ignored pixels are skipped.
    pub fn add_map(&mut self, truth: &[u8], pred: &[u8]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(DmtError::validation(
                "label and prediction maps differ in size",
            ));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t == IGNORE_LABEL {
                continue;
            }
            self.add(t as usize, p as usize)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(DmtError::validation(
                "confusion matrices differ in class count",
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU; `None` for classes with a zero denominator.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..self.classes).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..self.classes).map(|t| self.get(t, c)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }
}

/// Mean intersection-over-union over classes with a non-zero denominator.
pub fn mean_iou(cm: &ConfusionMatrix) -> Result<f64> {
    let ious: Vec<f64> = cm.class_iou().into_iter().flatten().collect();
    if ious.is_empty() {
        return Err(DmtError::UndefinedMetric(
            "mean IoU of an empty confusion matrix".into(),
        ));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Shadow copy of a parameter set, updated as an exponential moving average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub shadow: Vec<Vec<f32>>,
    pub decay: f64,
}

impl EmaState {
    pub fn new(params: &[&[f32]], decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(DmtError::validation(format!(
                "EMA decay {decay} outside [0, 1]"
            )));
        }
        Ok(EmaState {
            shadow: params.iter().map(|p| p.to_vec()).collect(),
            decay,
        })
    }
}

/// `shadow <- decay * shadow + (1 - decay) * current`, elementwise.
pub fn ema_update(ema: &mut EmaState, current: &[&[f32]]) -> Result<()> {
    ema_update_with_decay(ema, current, ema.decay)
}

/// [`ema_update`] with an explicit decay for this step (e.g. during warm-up).
pub fn ema_update_with_decay(ema: &mut EmaState, current: &[&[f32]], decay: f64) -> Result<()> {
    if current.len() != ema.shadow.len()
        || current
            .iter()
            .zip(&ema.shadow)
            .any(|(c, s)| c.len() != s.len())
    {
        return Err(DmtError::validation(
            "EMA shadow shapes do not match the tracked parameters",
        ));
    }
    let d = decay as f32;
    for (s, c) in ema.shadow.iter_mut().zip(current) {
        for (sv, &cv) in s.iter_mut().zip(c.iter()) {
            *sv = d * *sv + (1.0 - d) * cv;
        }
    }
    Ok(())
}

/// Supervised-baseline epoch budget, `round(sqrt(1 / ratio) * oracle_epochs)`
/// with halves rounded up.
pub fn baseline_epochs(labeled_ratio: f64, oracle_epochs: u32) -> Result<u32> {
    if !(labeled_ratio > 0.0 && labeled_ratio <= 1.0) {
        return Err(DmtError::validation(format!(
            "labeled ratio {labeled_ratio} outside (0, 1]"
        )));
    }
    if oracle_epochs == 0 {
        return Err(DmtError::validation("oracle epochs must be positive"));
    }
    let raw = (1.0 / labeled_ratio).sqrt() * oracle_epochs as f64;
    Ok((raw + 0.5).floor() as u32)
}

/// Argmax labels of a channel-major `[C][H][W]` probability slice.
pub fn argmax_map(probs: &[f32], classes: usize, pixels: usize) -> Vec<u8> {
    let mut buf = vec![0f32; classes];
    (0..pixels)
        .map(|px| {
            for (c, b) in buf.iter_mut().enumerate() {
                *b = probs[c * pixels + px];
            }
            argmax(&buf) as u8
        })
        .collect()
}
