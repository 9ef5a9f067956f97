use ndarray::{Array2, Array4, ArrayD, Ix2, Ix4};
use serde::{Deserialize, Serialize};

use crate::error::{DmtError, Result};
use crate::loss::{
    cross_entropy, dynamic_weight_slice, weight_case, GammaPair, WeightCase, PROB_FLOOR,
};
use crate::nn::{softmax_channels, softmax_rows, Network, Sgd};
use crate::prob::argmax;
use crate::pseudo_label::IGNORE_LABEL;

/// How an unlabeled element's target and loss weight are derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossRecipe {
    /// Three-case disagreement weight.
    Dynamic(GammaPair),
    /// Every pseudo label counts fully.
    Unit,
    /// Weight is the trained model's probability of the pseudo label.
    Naive,
    /// As `Dynamic`, but positive disagreements switch the target to the
    /// trained model's prediction with weight `(1 - c_A)^gamma2`.
    Flip(GammaPair),
    /// Labels come from the live prediction, kept above the threshold.
    Online { threshold: f64 },
}

/// Target class and loss weight for one element; `target == None` drops it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedTarget {
    pub target: Option<usize>,
    pub weight: f64,
    pub case: Option<WeightCase>,
}

impl WeightedTarget {
    fn labeled(y: usize) -> Self {
        WeightedTarget {
            target: Some(y),
            weight: 1.0,
            case: None,
        }
    }

    fn dropped() -> Self {
        WeightedTarget {
            target: None,
            weight: 0.0,
            case: None,
        }
    }
}

impl LossRecipe {
    /// The same recipe with its exponents replaced, for scheduled gammas.
    pub fn with_gammas(self, gammas: GammaPair) -> Self {
        match self {
            LossRecipe::Dynamic(_) => LossRecipe::Dynamic(gammas),
            LossRecipe::Flip(_) => LossRecipe::Flip(gammas),
            other => other,
        }
    }

    pub fn gammas(&self) -> Option<GammaPair> {
        match self {
            LossRecipe::Dynamic(g) | LossRecipe::Flip(g) => Some(*g),
            _ => None,
        }
    }

    /// Target and weight for a stored pseudo label `(y_a, c_a)` given the
    /// trained model's distribution `p_b`.
    pub fn pseudo_target(&self, y_a: usize, c_a: f64, p_b: &[f64]) -> WeightedTarget {
        let case = weight_case(y_a, c_a, p_b);
        let (target, weight) = match *self {
            LossRecipe::Dynamic(g) => (y_a, dynamic_weight_slice(y_a, c_a, p_b, g).weight),
            LossRecipe::Unit => (y_a, 1.0),
            LossRecipe::Naive => (y_a, p_b[y_a]),
            LossRecipe::Flip(g) => match case {
                WeightCase::PositiveDisagreement => (argmax(p_b), (1.0 - c_a).powf(g.gamma2)),
                _ => (y_a, dynamic_weight_slice(y_a, c_a, p_b, g).weight),
            },
            // a stored label under the online recipe is used as is
            LossRecipe::Online { .. } => (y_a, 1.0),
        };
        WeightedTarget {
            target: Some(target),
            weight,
            case: Some(case),
        }
    }

    /// Target for an element without a stored label; only the online
    /// recipe produces one.
    pub fn unlabeled_target(&self, p_b: &[f64]) -> WeightedTarget {
        match *self {
            LossRecipe::Online { threshold } => {
                let y = argmax(p_b);
                if p_b[y] > threshold {
                    WeightedTarget {
                        target: Some(y),
                        weight: 1.0,
                        case: Some(WeightCase::Agreement),
                    }
                } else {
                    WeightedTarget::dropped()
                }
            }
            _ => WeightedTarget::dropped(),
        }
    }
}

/// Loss routing tag for one classification batch element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassItem {
    Labeled(usize),
    Pseudo {
        label: usize,
        confidence: f64,
    },
    /// Unlabeled, to be labeled online from the live prediction.
    Unlabeled,
}

/// Per-step case tallies over pseudo-labeled elements (samples or pixels).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseCounts {
    pub agreement: u64,
    pub negative: u64,
    pub positive: u64,
    /// Unlabeled elements without a usable label.
    pub dropped: u64,
}

impl CaseCounts {
    fn add(&mut self, t: &WeightedTarget) {
        match (t.target, t.case) {
            (None, _) => self.dropped += 1,
            (_, Some(WeightCase::Agreement)) => self.agreement += 1,
            (_, Some(WeightCase::NegativeDisagreement)) => self.negative += 1,
            (_, Some(WeightCase::PositiveDisagreement)) => self.positive += 1,
            (_, None) => {}
        }
    }

    pub fn merge(&mut self, o: &CaseCounts) {
        self.agreement += o.agreement;
        self.negative += o.negative;
        self.positive += o.positive;
        self.dropped += o.dropped;
    }
}

/// What one optimizer step saw and optimized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: u64,
    pub lr: f64,
    pub gamma1: Option<f64>,
    pub gamma2: Option<f64>,
    /// Elements (samples or pixels) in the loss denominator.
    pub denominator: u64,
    pub labeled_loss: f64,
    pub unlabeled_loss: f64,
    /// The objective that was differentiated; differs from the sum of the
    /// two parts only under mixup.
    pub loss: f64,
    pub cases: CaseCounts,
    /// Unweighted cross-entropy of positive-disagreement elements, over the
    /// same denominator.
    pub positive_ce: f64,
    /// Unlabeled loss the shadow recipe would give on the same batch and
    /// model state, when one is configured.
    pub shadow_unlabeled_loss: Option<f64>,
}

struct Scored {
    targets: Vec<WeightedTarget>,
    labeled_loss: f64,
    unlabeled_loss: f64,
    positive_ce: f64,
    shadow: Option<f64>,
    cases: CaseCounts,
}

/// Scores per-element targets from the trained model's probabilities.
/// `elements` yields `(probs, item)`; the losses are sums, not yet divided.
fn score(
    elements: impl Iterator<Item = (Vec<f64>, ClassItem)>,
    recipe: &LossRecipe,
    shadow: Option<&LossRecipe>,
) -> Scored {
    let mut s = Scored {
        targets: Vec::new(),
        labeled_loss: 0.0,
        unlabeled_loss: 0.0,
        positive_ce: 0.0,
        shadow: shadow.map(|_| 0.0),
        cases: CaseCounts::default(),
    };
    for (p, item) in elements {
        let t = match item {
            ClassItem::Labeled(y) => {
                s.labeled_loss += cross_entropy(y, &p);
                WeightedTarget::labeled(y)
            }
            ClassItem::Pseudo { label, confidence } => {
                let t = recipe.pseudo_target(label, confidence, &p);
                if let Some(sh) = shadow {
                    let st = sh.pseudo_target(label, confidence, &p);
                    if let Some(y) = st.target {
                        *s.shadow.as_mut().unwrap() += st.weight * cross_entropy(y, &p);
                    }
                }
                if t.case == Some(WeightCase::PositiveDisagreement) {
                    s.positive_ce += cross_entropy(label, &p);
                }
                s.cases.add(&t);
                if let Some(y) = t.target {
                    s.unlabeled_loss += t.weight * cross_entropy(y, &p);
                }
                t
            }
            ClassItem::Unlabeled => {
                let t = recipe.unlabeled_target(&p);
                if let Some(sh) = shadow {
                    let st = sh.unlabeled_target(&p);
                    if let Some(y) = st.target {
                        *s.shadow.as_mut().unwrap() += st.weight * cross_entropy(y, &p);
                    }
                }
                s.cases.add(&t);
                if let Some(y) = t.target {
                    s.unlabeled_loss += t.weight * cross_entropy(y, &p);
                }
                t
            }
        };
        s.targets.push(t);
    }
    s
}

/// Mixup inputs for one step: coefficient and partner permutation.
#[derive(Debug, Clone, PartialEq)]
pub struct MixupDraw {
    pub lambda: f64,
    pub partner: Vec<usize>,
}

/// One SGD step on a classification batch. The loss is
/// `(1/N) sum w_i CE_i` over the whole batch, with weights treated as
/// constants. Under mixup the weights come from an extra forward pass on
/// the unmixed batch and are interpolated along with inputs and targets.
#[allow(clippy::too_many_arguments)]
pub fn classification_step(
    net: &mut Network,
    opt: &mut Sgd,
    lr: f64,
    inputs: Array2<f32>,
    items: &[ClassItem],
    recipe: &LossRecipe,
    shadow: Option<&LossRecipe>,
    mixup: Option<&MixupDraw>,
) -> Result<StepTrace> {
    let n = items.len();
    if n == 0 || inputs.nrows() != n {
        return Err(DmtError::validation(format!(
            "batch of {} rows with {n} routing tags",
            inputs.nrows()
        )));
    }
    let classes = net.classes();
    let x = net.rows_to_input(inputs.view())?;
    let to_probs = |logits: ArrayD<f32>| -> Array2<f32> {
        let mut p = logits
            .into_dimensionality::<Ix2>()
            .expect("per-sample logits");
        softmax_rows(&mut p);
        p
    };
    let probs = match mixup {
        None => to_probs(net.forward_train(x)),
        Some(_) => to_probs(net.logits(x)),
    };
    let rows = probs
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|&v| v as f64).collect::<Vec<f64>>());
    let scored = score(rows.zip(items.iter().copied()), recipe, shadow);
    let nf = n as f64;

    let mut grad = Array2::<f32>::zeros((n, classes));
    let loss = match mixup {
        None => {
            for (i, t) in scored.targets.iter().enumerate() {
                let Some(y) = t.target else { continue };
                let w = (t.weight / nf) as f32;
                for c in 0..classes {
                    grad[[i, c]] = w * (probs[[i, c]] - if c == y { 1.0 } else { 0.0 });
                }
            }
            (scored.labeled_loss + scored.unlabeled_loss) / nf
        }
        Some(draw) => {
            let mut onehot = Array2::<f32>::zeros((n, classes));
            let mut weights = vec![0f32; n];
            for (i, t) in scored.targets.iter().enumerate() {
                if let Some(y) = t.target {
                    onehot[[i, y]] = 1.0;
                    weights[i] = t.weight as f32;
                }
            }
            let mixed = crate::loss::mixup_batch(
                inputs.view(),
                onehot.view(),
                &weights,
                &draw.partner,
                draw.lambda,
            )?;
            let x = net.rows_to_input(mixed.inputs.view())?;
            let p = to_probs(net.forward_train(x));
            let mut total = 0.0;
            for i in 0..n {
                let w = mixed.weights[i];
                let mass: f32 = mixed.targets.row(i).sum();
                for c in 0..classes {
                    let t = mixed.targets[[i, c]];
                    if t > 0.0 {
                        total -= (w * t) as f64 * (p[[i, c]] as f64).max(PROB_FLOOR).ln();
                    }
                    grad[[i, c]] = w / n as f32 * (p[[i, c]] * mass - t);
                }
            }
            total / nf
        }
    };
    net.zero_grad();
    net.backward(grad.into_dyn());
    opt.step(net, lr);
    let g = recipe.gammas();
    Ok(StepTrace {
        step: 0,
        lr,
        gamma1: g.map(|g| g.gamma1),
        gamma2: g.map(|g| g.gamma2),
        denominator: n as u64,
        labeled_loss: scored.labeled_loss / nf,
        unlabeled_loss: scored.unlabeled_loss / nf,
        loss,
        cases: scored.cases,
        positive_ce: scored.positive_ce / nf,
        shadow_unlabeled_loss: scored.shadow.map(|v| v / nf),
    })
}

/// Loss routing for one image of a segmentation batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelSource {
    /// Ground-truth mask.
    Labeled,
    /// Stored pseudo labels and confidences.
    Pseudo,
    /// No labels; the online recipe labels pixels from the live prediction.
    Unlabeled,
}

/// One SGD step on a segmentation batch. `labels` and `confidences` are
/// `[B][H][W]`; ignored pixels (255) are excluded and the loss is divided
/// by the number of remaining pixels.
#[allow(clippy::too_many_arguments)]
pub fn segmentation_step(
    net: &mut Network,
    opt: &mut Sgd,
    lr: f64,
    images: Array4<f32>,
    labels: &[u8],
    confidences: &[f32],
    sources: &[PixelSource],
    recipe: &LossRecipe,
    shadow: Option<&LossRecipe>,
) -> Result<StepTrace> {
    let (b, _, h, w) = images.dim();
    let plane = h * w;
    if labels.len() != b * plane || confidences.len() != b * plane || sources.len() != b {
        return Err(DmtError::validation(
            "segmentation batch maps are misaligned",
        ));
    }
    let classes = net.classes();
    let mut probs = net
        .forward_train(images.into_dyn())
        .into_dimensionality::<Ix4>()
        .expect("dense logits");
    softmax_channels(&mut probs);
    let pdata = probs.as_slice().expect("standard layout");

    // pixels that take part in the loss, in batch order
    let mut pixels = Vec::new();
    for (bi, src) in sources.iter().enumerate() {
        for px in 0..plane {
            let k = bi * plane + px;
            let item = match src {
                PixelSource::Unlabeled => ClassItem::Unlabeled,
                _ if labels[k] == IGNORE_LABEL => continue,
                PixelSource::Labeled => ClassItem::Labeled(labels[k] as usize),
                PixelSource::Pseudo => ClassItem::Pseudo {
                    label: labels[k] as usize,
                    confidence: confidences[k] as f64,
                },
            };
            if let ClassItem::Labeled(y) | ClassItem::Pseudo { label: y, .. } = item {
                if y >= classes {
                    return Err(DmtError::Index {
                        index: y,
                        len: classes,
                    });
                }
            }
            pixels.push((bi, px, item));
        }
    }
    let base = |bi: usize| bi * classes * plane;
    let elements = pixels.iter().map(|&(bi, px, item)| {
        let p: Vec<f64> = (0..classes)
            .map(|c| pdata[base(bi) + c * plane + px] as f64)
            .collect();
        (p, item)
    });
    let scored = score(elements, recipe, shadow);
    let denom = scored.targets.iter().filter(|t| t.target.is_some()).count() as u64;
    let nf = denom.max(1) as f64;

    let mut grad = Array4::<f32>::zeros((b, classes, h, w));
    {
        let g = grad.as_slice_mut().unwrap();
        for (&(bi, px, _), t) in pixels.iter().zip(&scored.targets) {
            let Some(y) = t.target else { continue };
            let wt = (t.weight / nf) as f32;
            if wt == 0.0 {
                continue;
            }
            for c in 0..classes {
                let k = base(bi) + c * plane + px;
                g[k] = wt * (pdata[k] - if c == y { 1.0 } else { 0.0 });
            }
        }
    }
    net.zero_grad();
    net.backward(grad.into_dyn());
    opt.step(net, lr);
    let gm = recipe.gammas();
    Ok(StepTrace {
        step: 0,
        lr,
        gamma1: gm.map(|g| g.gamma1),
        gamma2: gm.map(|g| g.gamma2),
        denominator: denom,
        labeled_loss: scored.labeled_loss / nf,
        unlabeled_loss: scored.unlabeled_loss / nf,
        loss: (scored.labeled_loss + scored.unlabeled_loss) / nf,
        cases: scored.cases,
        positive_ce: scored.positive_ce / nf,
        shadow_unlabeled_loss: scored.shadow.map(|v| v / nf),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{combined_loss, LabeledSample, UnlabeledSample};
    use crate::nn::Architecture;
    use crate::prob::ProbabilityVector;

    fn g(v: f64) -> GammaPair {
        GammaPair::symmetric(v).unwrap()
    }

    #[test]
    fn recipe_examples() {
        let p = [0.2, 0.8];
        // positive disagreement: dynamic drops, naive keeps p_B, flip swaps
        let d = LossRecipe::Dynamic(g(2.0)).pseudo_target(0, 0.6, &p);
        assert_eq!(d.weight, 0.0);
        assert_eq!(d.case, Some(WeightCase::PositiveDisagreement));
        let n = LossRecipe::Naive.pseudo_target(0, 0.6, &[0.8, 0.2]);
        assert_eq!(n.weight, 0.8);
        let n = LossRecipe::Naive.pseudo_target(1, 0.6, &p);
        assert_eq!(n.weight, 0.8);
        let f = LossRecipe::Flip(g(2.0)).pseudo_target(0, 0.6, &p);
        assert_eq!(f.target, Some(1));
        assert!((f.weight - 0.16).abs() < 1e-12);
        let u = LossRecipe::Unit.pseudo_target(0, 0.6, &p);
        assert_eq!((u.target, u.weight), (Some(0), 1.0));

        let online = LossRecipe::Online { threshold: 0.9 };
        assert_eq!(online.unlabeled_target(&[0.9, 0.1]).target, None);
        assert_eq!(online.unlabeled_target(&[0.05, 0.95]).target, Some(1));
    }

    #[test]
    fn step_losses_match_reference_losses() {
        let arch = Architecture::Mlp {
            inputs: 2,
            hidden: vec![8],
            classes: 3,
        };
        let mut net = Network::new(arch, 4);
        let inputs =
            Array2::from_shape_vec((4, 2), vec![0.1, -0.3, 1.2, 0.5, -0.7, 0.9, 0.0, 0.4]).unwrap();
        let items = [
            ClassItem::Labeled(2),
            ClassItem::Pseudo {
                label: 0,
                confidence: 0.7,
            },
            ClassItem::Pseudo {
                label: 1,
                confidence: 0.4,
            },
            ClassItem::Pseudo {
                label: 2,
                confidence: 0.99,
            },
        ];
        let probs = net.predict_proba_rows(inputs.view()).unwrap();
        let pv = |i: usize| {
            let v: Vec<f64> = probs.row(i).iter().map(|&x| x as f64).collect();
            let s: f64 = v.iter().sum();
            ProbabilityVector::new(v.iter().map(|x| x / s).collect()).unwrap()
        };
        let lab = [LabeledSample {
            label: 2,
            probs: pv(0),
        }];
        let unl: Vec<UnlabeledSample> = items[1..]
            .iter()
            .enumerate()
            .map(|(k, it)| match *it {
                ClassItem::Pseudo { label, confidence } => UnlabeledSample {
                    pseudo_label: label,
                    confidence,
                    probs: pv(k + 1),
                },
                _ => unreachable!(),
            })
            .collect();
        let reference = combined_loss(&lab, &unl, g(1.5), 4).unwrap();
        let mut opt = Sgd::new(&net, 0.0, 0.0);
        let trace = classification_step(
            &mut net,
            &mut opt,
            0.0,
            inputs,
            &items,
            &LossRecipe::Dynamic(g(1.5)),
            Some(&LossRecipe::Unit),
            None,
        )
        .unwrap();
        assert!((trace.labeled_loss - reference.labeled_loss).abs() < 1e-5);
        assert!((trace.unlabeled_loss - reference.unlabeled_loss).abs() < 1e-5);
        assert!(trace.shadow_unlabeled_loss.unwrap() >= trace.unlabeled_loss);
    }
}
