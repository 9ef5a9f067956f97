//! The dynamic loss: disagreement-driven per-sample weights on pseudo-labeled
//! data, combined with the ordinary cross-entropy on labeled data.
//!
//! Everything here is a pure function of its inputs. The double-precision
//! functions are the reference path; the trainer calls [`dynamic_weight_slice`]
//! on single-precision outputs converted per sample.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{DmtError, Result};
use crate::prob::{argmax, softmax, ProbabilityMap, ProbabilityVector};
use crate::pseudo_label::{PseudoLabelMap, IGNORE_LABEL};

/// Probabilities below this floor are clamped before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Shannon entropy in nats, with `0 * ln 0 = 0`.
pub fn entropy(p: &ProbabilityVector) -> f64 {
    let h: f64 = p
        .as_slice()
        .iter()
        .filter(|&&pc| pc > 0.0)
        .map(|&pc| -pc * pc.ln())
        .sum();
    // summation noise can push a one-hot result to -0.0
    h.max(0.0)
}

/// Cross-entropy of a hard target under `probs`.
#[inline]
pub fn cross_entropy(target: usize, probs: &[f64]) -> f64 {
    -probs[target].max(PROB_FLOOR).ln()
}

/// Exponents applied to the agreement and negative-disagreement weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPair {
    pub gamma1: f64,
    pub gamma2: f64,
}

impl GammaPair {
    pub fn new(gamma1: f64, gamma2: f64) -> Result<Self> {
        if !(gamma1.is_finite() && gamma1 >= 0.0 && gamma2.is_finite() && gamma2 >= 0.0) {
            return Err(DmtError::validation(format!(
                "gammas must be finite and non-negative, got ({gamma1}, {gamma2})"
            )));
        }
        Ok(GammaPair { gamma1, gamma2 })
    }

    /// Both exponents set to the same value.
    pub fn symmetric(gamma: f64) -> Result<Self> {
        Self::new(gamma, gamma)
    }
}

/// Which of the three agreement cases a pseudo-labeled sample falls into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeightCase {
    /// The trained model's prediction matches the pseudo label.
    Agreement,
    /// It disagrees, but less confidently than the labeling model.
    NegativeDisagreement,
    /// It disagrees with higher confidence; the sample is dropped.
    PositiveDisagreement,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicWeightResult {
    pub weight: f64,
    pub case: WeightCase,
}

/// Classifies a sample into its agreement case from the labeling model's
/// `(y_a, c_a)` and the trained model's distribution.
#[inline]
pub fn weight_case(y_a: usize, c_a: f64, p_b: &[f64]) -> WeightCase {
    let y_b = argmax(p_b);
    if y_b == y_a {
        WeightCase::Agreement
    } else if c_a >= p_b[y_b] {
        WeightCase::NegativeDisagreement
    } else {
        WeightCase::PositiveDisagreement
    }
}

/// Unchecked form of [`dynamic_weight`] over a raw probability slice.
///
/// `y_a` must index into `p_b`.
#[inline]
pub fn dynamic_weight_slice(
    y_a: usize,
    c_a: f64,
    p_b: &[f64],
    gammas: GammaPair,
) -> DynamicWeightResult {
    let case = weight_case(y_a, c_a, p_b);
    let p = p_b[y_a];
    let weight = match case {
        WeightCase::Agreement => p.powf(gammas.gamma1),
        WeightCase::NegativeDisagreement => p.powf(gammas.gamma2),
        WeightCase::PositiveDisagreement => 0.0,
    };
    DynamicWeightResult { weight, case }
}

/// Dynamic loss weight for one pseudo-labeled sample.
///
/// `y_a`/`c_a` are the pseudo label and confidence from the frozen labeling
/// model; `p_b` is the distribution of the model being trained.
pub fn dynamic_weight(
    y_a: usize,
    c_a: f64,
    p_b: &ProbabilityVector,
    gammas: GammaPair,
) -> Result<DynamicWeightResult> {
    if y_a >= p_b.num_classes() {
        return Err(DmtError::Index {
            index: y_a,
            len: p_b.num_classes(),
        });
    }
    if !(c_a > 0.0 && c_a <= 1.0) {
        return Err(DmtError::validation(format!(
            "pseudo-label confidence {c_a} outside (0, 1]"
        )));
    }
    Ok(dynamic_weight_slice(y_a, c_a, p_b.as_slice(), gammas))
}

/// One cell of a [`WeightMap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightCell {
    Ignored,
    Scored(WeightCase),
}

/// Per-pixel dynamic weights for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f64>,
    pub cells: Vec<WeightCell>,
}

impl WeightMap {
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.width + col]
    }

    pub fn cell(&self, row: usize, col: usize) -> WeightCell {
        self.cells[row * self.width + col]
    }
}

/// Applies [`dynamic_weight`] independently at every pixel. Ignored pixels
/// get weight 0 and the [`WeightCell::Ignored`] marker.
pub fn dynamic_weight_map(
    pseudo: &PseudoLabelMap,
    p_b: &ProbabilityMap,
    gammas: GammaPair,
) -> Result<WeightMap> {
    if pseudo.height() != p_b.height() || pseudo.width() != p_b.width() {
        return Err(DmtError::validation(format!(
            "pseudo-label map is {}x{} but prediction map is {}x{}",
            pseudo.height(),
            pseudo.width(),
            p_b.height(),
            p_b.width()
        )));
    }
    let n = p_b.num_pixels();
    let mut weights = vec![0.0; n];
    let mut cells = vec![WeightCell::Ignored; n];
    let mut probs = Vec::with_capacity(p_b.classes());
    for px in 0..n {
        let label = pseudo.labels()[px];
        if label == IGNORE_LABEL {
            continue;
        }
        let label = label as usize;
        if label >= p_b.classes() {
            return Err(DmtError::Index {
                index: label,
                len: p_b.classes(),
            });
        }
        p_b.pixel_into(px, &mut probs);
        let r = dynamic_weight_slice(label, pseudo.confidences()[px] as f64, &probs, gammas);
        weights[px] = r.weight;
        cells[px] = WeightCell::Scored(r.case);
    }
    Ok(WeightMap {
        height: p_b.height(),
        width: p_b.width(),
        weights,
        cells,
    })
}

/// A pseudo-labeled sample as seen by the loss.
#[derive(Debug, Clone)]
pub struct UnlabeledSample {
    pub pseudo_label: usize,
    pub confidence: f64,
    pub probs: ProbabilityVector,
}

/// A ground-truth labeled sample as seen by the loss.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub label: usize,
    pub probs: ProbabilityVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub labeled_loss: f64,
    pub unlabeled_loss: f64,
    pub combined: f64,
}

fn check_batch_size(n: usize) -> Result<()> {
    if n == 0 {
        return Err(DmtError::validation("batch size N must be positive"));
    }
    Ok(())
}

/// Dynamic loss on pseudo-labeled samples, normalized by the full batch
/// size `n` (labeled and unlabeled together).
pub fn unlabeled_loss(batch: &[UnlabeledSample], gammas: GammaPair, n: usize) -> Result<f64> {
    check_batch_size(n)?;
    let mut total = 0.0;
    for s in batch {
        let w = dynamic_weight(s.pseudo_label, s.confidence, &s.probs, gammas)?;
        if w.weight > 0.0 {
            total += w.weight * cross_entropy(s.pseudo_label, s.probs.as_slice());
        }
    }
    Ok(total / n as f64)
}

/// Plain cross-entropy on labeled samples, normalized by the full batch size.
pub fn labeled_loss(batch: &[LabeledSample], n: usize) -> Result<f64> {
    check_batch_size(n)?;
    let mut total = 0.0;
    for s in batch {
        if s.label >= s.probs.num_classes() {
            return Err(DmtError::Index {
                index: s.label,
                len: s.probs.num_classes(),
            });
        }
        total += cross_entropy(s.label, s.probs.as_slice());
    }
    Ok(total / n as f64)
}

/// Sum of the labeled and dynamic losses. `n` must equal the total number
/// of samples in both slices.
pub fn combined_loss(
    labeled: &[LabeledSample],
    unlabeled: &[UnlabeledSample],
    gammas: GammaPair,
    n: usize,
) -> Result<LossBreakdown> {
    if n != labeled.len() + unlabeled.len() {
        return Err(DmtError::validation(format!(
            "N = {n} but the batch holds {} labeled + {} unlabeled samples",
            labeled.len(),
            unlabeled.len()
        )));
    }
    let labeled_loss = labeled_loss(labeled, n)?;
    let unlabeled_loss = unlabeled_loss(unlabeled, gammas, n)?;
    Ok(LossBreakdown {
        labeled_loss,
        unlabeled_loss,
        combined: labeled_loss + unlabeled_loss,
    })
}

/// Logit-space sample for gradient computations.
#[derive(Debug, Clone)]
pub enum LogitSample {
    Labeled {
        label: usize,
        logits: Vec<f64>,
    },
    Pseudo {
        label: usize,
        confidence: f64,
        logits: Vec<f64>,
    },
}

impl LogitSample {
    fn logits(&self) -> &[f64] {
        match self {
            LogitSample::Labeled { logits, .. } | LogitSample::Pseudo { logits, .. } => logits,
        }
    }
}

/// How the dynamic weight participates in differentiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightGradient {
    /// The weight is a function of the logits and is differentiated.
    Full,
    /// The weight is treated as a constant (stop-gradient), as in training.
    Detached,
}

/// Combined loss of a logit batch (double precision, `N` = batch length).
pub fn combined_loss_from_logits(batch: &[LogitSample], gammas: GammaPair) -> Result<f64> {
    check_batch_size(batch.len())?;
    let n = batch.len() as f64;
    let mut total = 0.0;
    for s in batch {
        let p = softmax(s.logits());
        match s {
            LogitSample::Labeled { label, .. } => total += cross_entropy(*label, &p),
            LogitSample::Pseudo {
                label, confidence, ..
            } => {
                let w = dynamic_weight_slice(*label, *confidence, &p, gammas);
                if w.weight > 0.0 {
                    total += w.weight * cross_entropy(*label, &p);
                }
            }
        }
    }
    Ok(total / n)
}

/// Analytic gradient of [`combined_loss_from_logits`] with respect to every
/// logit. Within a fixed case, `d(w * CE)/dz = w (s - e_y)(1 - gamma * CE)`
/// when the weight is differentiated, and `w (s - e_y)` when detached.
pub fn combined_loss_logit_grad(
    batch: &[LogitSample],
    gammas: GammaPair,
    mode: WeightGradient,
) -> Result<Vec<Vec<f64>>> {
    check_batch_size(batch.len())?;
    let n = batch.len() as f64;
    let mut grads = Vec::with_capacity(batch.len());
    for s in batch {
        let p = softmax(s.logits());
        let (label, weight, gamma) = match s {
            LogitSample::Labeled { label, .. } => (*label, 1.0, 0.0),
            LogitSample::Pseudo {
                label, confidence, ..
            } => {
                let r = dynamic_weight_slice(*label, *confidence, &p, gammas);
                let gamma = match r.case {
                    WeightCase::Agreement => gammas.gamma1,
                    WeightCase::NegativeDisagreement => gammas.gamma2,
                    WeightCase::PositiveDisagreement => 0.0,
                };
                (*label, r.weight, gamma)
            }
        };
        if label >= p.len() {
            return Err(DmtError::Index {
                index: label,
                len: p.len(),
            });
        }
        let clamped = p[label] < PROB_FLOOR;
        let ce = cross_entropy(label, &p);
        let scale = match mode {
            WeightGradient::Full if !clamped => weight * (1.0 - gamma * ce),
            WeightGradient::Full => 0.0,
            WeightGradient::Detached if clamped => 0.0,
            WeightGradient::Detached => weight,
        };
        let g: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(k, &pk)| {
                let onehot = if k == label { 1.0 } else { 0.0 };
                scale * (pk - onehot) / n
            })
            .collect();
        grads.push(g);
    }
    Ok(grads)
}

/// Sign of the exponent in the gamma ramp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaScheduleSign {
    /// `gamma_max * exp(+5 (1 - t/t_max)^2)`: very large early, decaying to `gamma_max`.
    #[default]
    Positive,
    /// `gamma_max * exp(-5 (1 - t/t_max)^2)`: ramps up to `gamma_max`.
    Negative,
}

/// Gamma value at step `t` of `t_max` using the decaying ramp.
pub fn gamma_schedule(t: u64, t_max: u64, gamma_max: f64) -> Result<f64> {
    gamma_schedule_signed(t, t_max, gamma_max, GammaScheduleSign::Positive)
}

pub fn gamma_schedule_signed(
    t: u64,
    t_max: u64,
    gamma_max: f64,
    sign: GammaScheduleSign,
) -> Result<f64> {
    if t_max == 0 {
        return Err(DmtError::validation("t_max must be positive"));
    }
    if !(gamma_max.is_finite() && gamma_max >= 0.0) {
        return Err(DmtError::validation(format!(
            "gamma_max must be non-negative, got {gamma_max}"
        )));
    }
    let t = if t > t_max {
        log::warn!("gamma schedule step {t} exceeds t_max {t_max}; clamping");
        t_max
    } else {
        t
    };
    let remaining = 1.0 - t as f64 / t_max as f64;
    let exponent = 5.0 * remaining * remaining;
    Ok(match sign {
        GammaScheduleSign::Positive => gamma_max * exponent.exp(),
        GammaScheduleSign::Negative => gamma_max * (-exponent).exp(),
    })
}

/// Output of [`mixup_batch`].
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub inputs: Array2<f32>,
    pub targets: Array2<f32>,
    pub weights: Vec<f32>,
}

/// Convex combination of every row with its partner row
/// `lambda * a + (1 - lambda) * b`, applied to inputs, soft targets and
/// dynamic weights alike.
pub fn mixup_batch(
    inputs: ArrayView2<f32>,
    targets: ArrayView2<f32>,
    weights: &[f32],
    partner: &[usize],
    lambda: f64,
) -> Result<MixedBatch> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(DmtError::validation(format!(
            "mixup lambda {lambda} outside [0, 1]"
        )));
    }
    let n = inputs.nrows();
    if targets.nrows() != n || weights.len() != n || partner.len() != n {
        return Err(DmtError::validation(
            "mixup inputs, targets, weights and pairing must be aligned",
        ));
    }
    if let Some(&bad) = partner.iter().find(|&&j| j >= n) {
        return Err(DmtError::Index { index: bad, len: n });
    }
    let lam = lambda as f32;
    let mix = |a: ArrayView2<f32>| -> Array2<f32> {
        let shuffled = a.select(Axis(0), partner);
        &a * lam + &shuffled * (1.0 - lam)
    };
    let mixed_weights = weights
        .iter()
        .zip(partner)
        .map(|(&w, &j)| lam * w + (1.0 - lam) * weights[j])
        .collect();
    Ok(MixedBatch {
        inputs: mix(inputs),
        targets: mix(targets),
        weights: mixed_weights,
    })
}

/// Draws a mixup coefficient from `Beta(alpha, alpha)`.
pub fn sample_mixup_lambda<R: Rng + ?Sized>(rng: &mut R, alpha: f64) -> Result<f64> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| DmtError::validation(format!("invalid mixup alpha {alpha}: {e}")))?;
    Ok(beta.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn pv(v: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn entropy_fixtures() {
        assert_eq!(entropy(&pv(&[1.0, 0.0, 0.0, 0.0])), 0.0);
        assert!((entropy(&pv(&[0.5, 0.5])) - 2f64.ln()).abs() < 1e-12);
        assert!((entropy(&ProbabilityVector::uniform(4)) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn weight_fixtures() {
        let g = GammaPair::symmetric(5.0).unwrap();
        let r = dynamic_weight(0, 0.9, &pv(&[0.5, 0.5]), g).unwrap();
        assert_eq!(r.case, WeightCase::Agreement);
        assert!((r.weight - 0.03125).abs() < 1e-15);

        let r = dynamic_weight(0, 0.9, &pv(&[0.3, 0.7]), g).unwrap();
        assert_eq!(r.case, WeightCase::NegativeDisagreement);
        assert!((r.weight - 0.00243).abs() < 1e-15);

        let r = dynamic_weight(0, 0.6, &pv(&[0.2, 0.8]), g).unwrap();
        assert_eq!(r.case, WeightCase::PositiveDisagreement);
        assert_eq!(r.weight, 0.0);
    }

    #[test]
    fn confidence_tie_is_negative_disagreement() {
        let g = GammaPair::symmetric(1.0).unwrap();
        let r = dynamic_weight(0, 0.7, &pv(&[0.3, 0.7]), g).unwrap();
        assert_eq!(r.case, WeightCase::NegativeDisagreement);
    }

    #[test]
    fn weight_rejects_bad_index() {
        let g = GammaPair::symmetric(1.0).unwrap();
        assert!(matches!(
            dynamic_weight(2, 0.9, &pv(&[0.5, 0.5]), g),
            Err(DmtError::Index { index: 2, len: 2 })
        ));
    }

    #[test]
    fn gamma_pair_rejects_negative() {
        assert!(GammaPair::new(-1.0, 1.0).is_err());
        assert!(GammaPair::new(1.0, f64::NAN).is_err());
    }

    #[test]
    fn loss_fixtures() {
        let g1 = GammaPair::symmetric(1.0).unwrap();
        let u = UnlabeledSample {
            pseudo_label: 0,
            confidence: 0.9,
            probs: pv(&[0.7, 0.3]),
        };
        let lu = unlabeled_loss(std::slice::from_ref(&u), g1, 1).unwrap();
        assert!((lu - 0.7 * -(0.7f64.ln())).abs() < 1e-12);
        assert!((lu - 0.24967).abs() < 1e-5);

        let l = LabeledSample {
            label: 1,
            probs: pv(&[0.1, 0.9]),
        };
        let ll = labeled_loss(std::slice::from_ref(&l), 1).unwrap();
        assert!((ll - 0.10536).abs() < 1e-5);
        assert_eq!(labeled_loss(&[], 3).unwrap(), 0.0);

        let both = combined_loss(&[l], &[u], g1, 2).unwrap();
        assert!((both.combined - (ll + lu) / 2.0).abs() < 1e-12);
        assert!((both.labeled_loss - ll / 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_agreement_zero_loss() {
        let g = GammaPair::symmetric(4.0).unwrap();
        let u = UnlabeledSample {
            pseudo_label: 1,
            confidence: 0.5,
            probs: pv(&[0.0, 1.0]),
        };
        assert_eq!(unlabeled_loss(&[u], g, 1).unwrap(), 0.0);
    }

    #[test]
    fn all_case_three_zero_loss() {
        let g = GammaPair::symmetric(2.0).unwrap();
        let batch: Vec<_> = (0..4)
            .map(|_| UnlabeledSample {
                pseudo_label: 0,
                confidence: 0.55,
                probs: pv(&[0.1, 0.9]),
            })
            .collect();
        assert_eq!(unlabeled_loss(&batch, g, 8).unwrap(), 0.0);
    }

    #[test]
    fn combined_loss_checks_n() {
        let g = GammaPair::symmetric(1.0).unwrap();
        assert!(combined_loss(&[], &[], g, 1).is_err());
        assert!(unlabeled_loss(&[], g, 0).is_err());
    }

    #[test]
    fn schedule_fixtures() {
        assert_eq!(gamma_schedule(100, 100, 4.0).unwrap(), 4.0);
        assert!((gamma_schedule(0, 100, 4.0).unwrap() - 4.0 * 5f64.exp()).abs() < 1e-9);
        assert!((gamma_schedule(50, 100, 1.0).unwrap() - 1.25f64.exp()).abs() < 1e-12);
        // clamped
        assert_eq!(gamma_schedule(150, 100, 4.0).unwrap(), 4.0);
        assert!(gamma_schedule(0, 0, 4.0).is_err());
        let neg = gamma_schedule_signed(0, 100, 4.0, GammaScheduleSign::Negative).unwrap();
        assert!((neg - 4.0 * (-5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn mixup_fixtures() {
        let x = array![[1.0f32, 2.0], [3.0, 4.0]];
        let t = array![[1.0f32, 0.0], [0.0, 1.0]];
        let w = [1.0f32, 0.0];
        let partner = [1usize, 0];

        let same = mixup_batch(x.view(), t.view(), &w, &partner, 1.0).unwrap();
        assert_eq!(same.inputs, x);
        assert_eq!(same.weights, w.to_vec());

        let swapped = mixup_batch(x.view(), t.view(), &w, &partner, 0.0).unwrap();
        assert_eq!(swapped.inputs, array![[3.0f32, 4.0], [1.0, 2.0]]);
        assert_eq!(swapped.targets, array![[0.0f32, 1.0], [1.0, 0.0]]);

        let half = mixup_batch(x.view(), t.view(), &w, &partner, 0.5).unwrap();
        assert_eq!(half.weights, vec![0.5, 0.5]);
        assert!(mixup_batch(x.view(), t.view(), &w, &partner, 1.5).is_err());
    }
}
