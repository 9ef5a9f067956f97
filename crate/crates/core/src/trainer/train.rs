use std::time::Instant;

use ndarray::{s, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{ClassAugment, SegAugment, SegSample};
use super::batch::{BatchComposition, BatchSampler, Source};
use super::step::{
    classification_step, segmentation_step, CaseCounts, ClassItem, LossRecipe, MixupDraw,
    PixelSource, StepTrace,
};
use crate::data::{ClassificationData, SegmentationData};
use crate::error::Result;
use crate::init::derive_seed;
use crate::loss::{gamma_schedule_signed, sample_mixup_lambda, GammaPair, GammaScheduleSign};
use crate::metrics::{ema_update_with_decay, EmaState};
use crate::nn::{LrSchedule, Network, Sgd};
use crate::pseudo_label::PseudoLabelMap;

/// Optimization settings for one training run of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub epochs: usize,
    pub composition: BatchComposition,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub recipe: LossRecipe,
    /// Ramp the recipe's gammas over the run, ending at their configured value.
    pub gamma_schedule: Option<GammaScheduleSign>,
    /// Second recipe evaluated on every batch for the trace only.
    pub shadow: Option<LossRecipe>,
    pub mixup_alpha: Option<f64>,
    pub ema_decay: Option<f64>,
    /// Shrinks the epoch count after the first epoch if the projected
    /// wall-clock time exceeds this budget.
    pub max_seconds: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub traces: Vec<StepTrace>,
    /// Parameter EMA of the trained model, when tracked.
    pub ema: Option<Network>,
    pub steps: u64,
    pub epochs: usize,
    pub cases: CaseCounts,
}

/// An unlabeled classification sample: a stored pseudo label, or `None`
/// for online labeling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolItem {
    pub index: usize,
    pub label: Option<usize>,
    pub confidence: f64,
}

/// An unlabeled image: its stored pseudo-label map, or `None` for online
/// labeling.
#[derive(Debug, Clone, Copy)]
pub struct SegPoolItem<'a> {
    pub index: usize,
    pub map: Option<&'a PseudoLabelMap>,
}

/// Falls back to a single-pool batch when the other pool is empty.
fn effective_composition(c: BatchComposition, labeled: usize, pool: usize) -> BatchComposition {
    if pool == 0 && c.unlabeled > 0 {
        log::info!("no pseudo-labeled samples; training on labeled data only");
        BatchComposition {
            labeled: c.total(),
            unlabeled: 0,
        }
    } else if labeled == 0 && c.labeled > 0 {
        BatchComposition {
            labeled: 0,
            unlabeled: c.total(),
        }
    } else {
        c
    }
}

struct Loop {
    spec: TrainSpec,
    opt: Sgd,
    ema: Option<EmaState>,
    rng: ChaCha8Rng,
    sampler: BatchSampler,
    base_gammas: Option<GammaPair>,
    t_max: u64,
    epochs: usize,
}

impl Loop {
    fn new(
        net: &Network,
        spec: &TrainSpec,
        labeled: usize,
        pool: usize,
        seed: u64,
    ) -> Result<Self> {
        let comp = effective_composition(spec.composition, labeled, pool);
        let sampler = BatchSampler::new(comp, labeled, pool, derive_seed(seed, "batches", 0))?;
        let ema = match spec.ema_decay {
            Some(d) => Some(EmaState::new(&net.params(), d)?),
            None => None,
        };
        Ok(Loop {
            opt: Sgd::new(net, spec.momentum, spec.weight_decay),
            ema,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "augment", 0)),
            t_max: (spec.epochs * sampler.steps_per_epoch()) as u64,
            epochs: spec.epochs,
            sampler,
            base_gammas: spec.recipe.gammas(),
            spec: spec.clone(),
        })
    }

    fn recipe_at(&self, t: u64) -> Result<LossRecipe> {
        match (self.spec.gamma_schedule, self.base_gammas) {
            (Some(sign), Some(g)) => {
                let t_max = self.t_max.max(1);
                let g1 = gamma_schedule_signed(t.min(t_max), t_max, g.gamma1, sign)?;
                let g2 = gamma_schedule_signed(t.min(t_max), t_max, g.gamma2, sign)?;
                Ok(self.spec.recipe.with_gammas(GammaPair {
                    gamma1: g1,
                    gamma2: g2,
                }))
            }
            _ => Ok(self.spec.recipe),
        }
    }

    fn lr_at(&self, t: u64) -> f64 {
        self.spec
            .lr_schedule
            .value(self.spec.learning_rate, t, self.t_max)
    }

    fn after_step(&mut self, net: &Network, t: u64) -> Result<()> {
        if let Some(ema) = &mut self.ema {
            // short warm-up so early shadows do not stay at the initialization
            let decay = ema.decay.min((1.0 + t as f64) / (10.0 + t as f64));
            ema_update_with_decay(ema, &net.params(), decay)?;
        }
        Ok(())
    }

    /// Re-plans the run once the first epoch has been timed.
    fn check_budget(&mut self, started: Instant) {
        let Some(budget) = self.spec.max_seconds else {
            return;
        };
        let per_epoch = started.elapsed().as_secs_f64();
        if per_epoch * self.epochs as f64 > budget {
            let fit = ((budget / per_epoch).floor() as usize).clamp(1, self.epochs);
            log::warn!(
                "{} epochs at {per_epoch:.1}s each exceed the {budget}s budget; running {fit}",
                self.epochs
            );
            self.epochs = fit;
            self.t_max = (fit * self.sampler.steps_per_epoch()) as u64;
        }
    }

    fn finish(self, net: &Network, traces: Vec<StepTrace>) -> Result<TrainOutcome> {
        let mut cases = CaseCounts::default();
        for t in &traces {
            cases.merge(&t.cases);
        }
        let ema = match self.ema {
            Some(e) => Some(net.with_params(&e.shadow)?),
            None => None,
        };
        Ok(TrainOutcome {
            steps: traces.len() as u64,
            traces,
            ema,
            epochs: self.epochs,
            cases,
        })
    }
}

/// Trains a per-sample classifier on labeled rows plus a pool of
/// pseudo-labeled (or online) rows.
pub fn train_classifier(
    net: &mut Network,
    data: &ClassificationData,
    labeled: &[usize],
    pool: &[PoolItem],
    augment: &ClassAugment,
    spec: &TrainSpec,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut lp = Loop::new(net, spec, labeled.len(), pool.len(), seed)?;
    let mut traces = Vec::new();
    let mut t = 0u64;
    let mut epoch = 0;
    let started = Instant::now();
    while epoch < lp.epochs {
        for _ in 0..lp.sampler.steps_per_epoch() {
            let slots = lp.sampler.compose_batch();
            let mut ids = Vec::with_capacity(slots.len());
            let mut items = Vec::with_capacity(slots.len());
            for slot in &slots {
                match slot.source {
                    Source::Labeled => {
                        let i = labeled[slot.position];
                        ids.push(i);
                        items.push(ClassItem::Labeled(data.labels[i]));
                    }
                    Source::Pseudo => {
                        let p = pool[slot.position];
                        ids.push(p.index);
                        items.push(match p.label {
                            Some(label) => ClassItem::Pseudo {
                                label,
                                confidence: p.confidence,
                            },
                            None => ClassItem::Unlabeled,
                        });
                    }
                }
            }
            let mut rows = data.rows(&ids);
            augment.apply(&mut rows, &mut lp.rng);
            let mixup = match spec.mixup_alpha {
                Some(alpha) => {
                    let lambda = sample_mixup_lambda(&mut lp.rng, alpha)?;
                    let mut partner: Vec<usize> = (0..ids.len()).collect();
                    partner.shuffle(&mut lp.rng);
                    Some(MixupDraw { lambda, partner })
                }
                None => None,
            };
            let recipe = lp.recipe_at(t)?;
            let lr = lp.lr_at(t);
            let mut trace = classification_step(
                net,
                &mut lp.opt,
                lr,
                rows,
                &items,
                &recipe,
                spec.shadow.as_ref(),
                mixup.as_ref(),
            )?;
            trace.step = t;
            traces.push(trace);
            lp.after_step(net, t)?;
            t += 1;
        }
        if epoch == 0 {
            lp.check_budget(started);
        }
        epoch += 1;
    }
    lp.finish(net, traces)
}

fn seg_sample(
    data: &SegmentationData,
    index: usize,
    labels: &[u8],
    conf: Option<&[f32]>,
) -> SegSample {
    let plane = labels.len();
    SegSample {
        image: data.images.slice(s![index, .., .., ..]).to_owned(),
        labels: labels.to_vec(),
        confidences: match conf {
            Some(c) => c.to_vec(),
            None => vec![1.0; plane],
        },
    }
}

/// Trains a dense model on labeled masks plus pseudo-labeled (or online)
/// images.
pub fn train_segmenter(
    net: &mut Network,
    data: &SegmentationData,
    labeled: &[usize],
    pool: &[SegPoolItem<'_>],
    augment: &SegAugment,
    spec: &TrainSpec,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut lp = Loop::new(net, spec, labeled.len(), pool.len(), seed)?;
    let mut traces = Vec::new();
    let mut t = 0u64;
    let mut epoch = 0;
    let started = Instant::now();
    let plane = data.height() * data.width();
    let blank = vec![0u8; plane];
    while epoch < lp.epochs {
        for _ in 0..lp.sampler.steps_per_epoch() {
            let slots = lp.sampler.compose_batch();
            let mut samples = Vec::with_capacity(slots.len());
            let mut sources = Vec::with_capacity(slots.len());
            for slot in &slots {
                let (sample, src) = match slot.source {
                    Source::Labeled => {
                        let i = labeled[slot.position];
                        (
                            seg_sample(data, i, &data.masks[i], None),
                            PixelSource::Labeled,
                        )
                    }
                    Source::Pseudo => {
                        let item = pool[slot.position];
                        match item.map {
                            Some(m) => (
                                seg_sample(data, item.index, m.labels(), Some(m.confidences())),
                                PixelSource::Pseudo,
                            ),
                            None => (
                                seg_sample(data, item.index, &blank, None),
                                PixelSource::Unlabeled,
                            ),
                        }
                    }
                };
                samples.push(augment.apply(&sample, &mut lp.rng));
                sources.push(src);
            }
            let (c, h, w) = samples[0].image.dim();
            let mut images = Array4::zeros((samples.len(), c, h, w));
            let mut labels = Vec::with_capacity(samples.len() * h * w);
            let mut confs = Vec::with_capacity(samples.len() * h * w);
            for (mut dst, s) in images.axis_iter_mut(Axis(0)).zip(&samples) {
                dst.assign(&s.image);
                labels.extend_from_slice(&s.labels);
                confs.extend_from_slice(&s.confidences);
            }
            let recipe = lp.recipe_at(t)?;
            let lr = lp.lr_at(t);
            let mut trace = segmentation_step(
                net,
                &mut lp.opt,
                lr,
                images,
                &labels,
                &confs,
                &sources,
                &recipe,
                spec.shadow.as_ref(),
            )?;
            trace.step = t;
            traces.push(trace);
            lp.after_step(net, t)?;
            t += 1;
        }
        if epoch == 0 {
            lp.check_budget(started);
        }
        epoch += 1;
    }
    lp.finish(net, traces)
}
