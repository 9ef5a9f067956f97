//! Pseudo-label generation and selection from a frozen model's predictions.

mod io;
mod stats;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{DmtError, Result};
use crate::prob::{ProbabilityMap, ProbabilityVector};

pub use io::{
    load_pseudo_label_maps, load_pseudo_label_records, read_dmtl, save_pseudo_label_maps,
    save_pseudo_label_records, write_dmtl, Manifest, ManifestEntry, PayloadFormat, MANIFEST_FILE,
};
pub use stats::{pseudo_label_error_stats, ErrorReport, QuantileError, REPORT_QUANTILES};

/// Label value marking an ignored pixel.
pub const IGNORE_LABEL: u8 = 255;

/// Which model produced a set of pseudo labels, and for which iteration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSource {
    pub model: String,
    pub iteration: u32,
}

impl LabelSource {
    pub fn new(model: impl Into<String>, iteration: u32) -> Self {
        LabelSource {
            model: model.into(),
            iteration,
        }
    }
}

/// A single prediction to be pseudo-labeled.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub sample_id: String,
    pub probs: ProbabilityVector,
}

/// A hard pseudo label for one sample. `label == None` means ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub sample_id: String,
    pub label: Option<usize>,
    pub confidence: f64,
    pub source_model: String,
    pub iteration: u32,
}

impl PseudoLabelRecord {
    pub fn new(
        sample_id: impl Into<String>,
        label: Option<usize>,
        confidence: f64,
        source: &LabelSource,
    ) -> Result<Self> {
        let r = PseudoLabelRecord {
            sample_id: sample_id.into(),
            label,
            confidence,
            source_model: source.model.clone(),
            iteration: source.iteration,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.confidence > 0.0 && self.confidence <= 1.0) {
            return Err(DmtError::validation(format!(
                "record {} has confidence {} outside (0, 1]",
                self.sample_id, self.confidence
            )));
        }
        if self.iteration < 1 {
            return Err(DmtError::validation(format!(
                "record {} has iteration 0",
                self.sample_id
            )));
        }
        Ok(())
    }
}

/// Dense pseudo labels for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelMap {
    sample_id: String,
    height: usize,
    width: usize,
    labels: Vec<u8>,
    confidences: Vec<f32>,
    source_model: String,
    iteration: u32,
}

impl PseudoLabelMap {
    pub fn new(
        sample_id: impl Into<String>,
        height: usize,
        width: usize,
        labels: Vec<u8>,
        confidences: Vec<f32>,
        source: &LabelSource,
    ) -> Result<Self> {
        let sample_id = sample_id.into();
        if labels.len() != height * width || confidences.len() != labels.len() {
            return Err(DmtError::validation(format!(
                "pseudo-label map {sample_id}: labels ({}) and confidences ({}) must both hold {}x{} values",
                labels.len(),
                confidences.len(),
                height,
                width
            )));
        }
        for (px, (&l, &c)) in labels.iter().zip(&confidences).enumerate() {
            if !(0.0..=1.0).contains(&c) {
                return Err(DmtError::validation(format!(
                    "pseudo-label map {sample_id}: pixel {px} confidence {c} outside [0, 1]"
                )));
            }
            if l != IGNORE_LABEL && c <= 0.0 {
                return Err(DmtError::validation(format!(
                    "pseudo-label map {sample_id}: labeled pixel {px} has zero confidence"
                )));
            }
        }
        Ok(PseudoLabelMap {
            sample_id,
            height,
            width,
            labels,
            confidences,
            source_model: source.model.clone(),
            iteration: source.iteration,
        })
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn confidences(&self) -> &[f32] {
        &self.confidences
    }

    pub fn source_model(&self) -> &str {
        &self.source_model
    }

    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    pub fn labeled_pixels(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_LABEL).count()
    }
}

/// How pseudo labels are chosen from predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "parameter", rename_all = "snake_case")]
pub enum SelectionPolicy {
    /// Keep a prediction when its confidence strictly exceeds the threshold.
    FixedThreshold(f64),
    /// Keep the most confident fraction of samples.
    TopFraction(f64),
    /// Keep the most confident fraction of pixels within each predicted class.
    ClassBalancedTopFraction(f64),
    /// Class-wise threshold re-normalization, keeping re-normalized maxima above one.
    CbstRenormalized(f64),
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SelectionPolicy::FixedThreshold(t) => check_threshold(t),
            SelectionPolicy::TopFraction(a)
            | SelectionPolicy::ClassBalancedTopFraction(a)
            | SelectionPolicy::CbstRenormalized(a) => check_fraction(a),
        }
    }

    /// Applies the policy to per-sample predictions.
    pub fn select_records(
        &self,
        predictions: &[Prediction],
        source: &LabelSource,
    ) -> Result<Vec<PseudoLabelRecord>> {
        match *self {
            SelectionPolicy::FixedThreshold(t) => threshold_pseudo_labels(predictions, t, source),
            SelectionPolicy::TopFraction(a) => top_fraction_select(predictions, a, source),
            SelectionPolicy::ClassBalancedTopFraction(a) => {
                class_balanced_select_records(predictions, a, source)
            }
            SelectionPolicy::CbstRenormalized(a) => {
                cbst_renormalized_select_records(predictions, a, source)
            }
        }
    }

    /// Applies the policy to dense prediction maps.
    pub fn select_maps(
        &self,
        maps: &[ProbabilityMap],
        source: &LabelSource,
    ) -> Result<Vec<PseudoLabelMap>> {
        match *self {
            SelectionPolicy::FixedThreshold(t) => threshold_maps(maps, t, source),
            SelectionPolicy::TopFraction(_) => Err(DmtError::config(
                "top-fraction selection ranks whole samples and does not apply to maps",
            )),
            SelectionPolicy::ClassBalancedTopFraction(a) => class_balanced_select(maps, a, source),
            SelectionPolicy::CbstRenormalized(a) => cbst_renormalized_select(maps, a, source),
        }
    }
}

fn check_fraction(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(DmtError::validation(format!(
            "selection fraction {alpha} outside (0, 1]"
        )));
    }
    Ok(())
}

fn check_threshold(t: f64) -> Result<()> {
    if !(0.0..1.0).contains(&t) {
        return Err(DmtError::validation(format!(
            "selection threshold {t} outside [0, 1)"
        )));
    }
    Ok(())
}

/// `floor(alpha * n)`, robust to representation error in `alpha`.
pub fn selection_count(alpha: f64, n: usize) -> usize {
    let k = (alpha * n as f64 + 1e-9).floor() as usize;
    k.min(n)
}

/// Descending confidence, then ascending position.
fn rank_order(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// Labels every prediction whose confidence strictly exceeds `threshold`;
/// the rest are kept as ignored records with their confidence.
pub fn threshold_pseudo_labels(
    predictions: &[Prediction],
    threshold: f64,
    source: &LabelSource,
) -> Result<Vec<PseudoLabelRecord>> {
    check_threshold(threshold)?;
    predictions
        .iter()
        .map(|p| {
            let conf = p.probs.confidence();
            let label = (conf > threshold).then(|| p.probs.argmax());
            PseudoLabelRecord::new(p.sample_id.clone(), label, conf, source)
        })
        .collect()
}

fn threshold_maps(
    maps: &[ProbabilityMap],
    threshold: f64,
    source: &LabelSource,
) -> Result<Vec<PseudoLabelMap>> {
    check_threshold(threshold)?;
    maps.iter()
        .map(|m| {
            let n = m.num_pixels();
            let mut labels = vec![IGNORE_LABEL; n];
            let mut confs = vec![0.0f32; n];
            for px in 0..n {
                let (c, p) = m.pixel_argmax(px);
                confs[px] = p;
                if p as f64 > threshold {
                    labels[px] = c as u8;
                }
            }
            PseudoLabelMap::new(m.sample_id(), m.height(), m.width(), labels, confs, source)
        })
        .collect()
}

/// Keeps the `floor(alpha * n)` most confident samples, in rank order.
/// Confidence ties break by input position.
pub fn top_fraction_select(
    predictions: &[Prediction],
    alpha: f64,
    source: &LabelSource,
) -> Result<Vec<PseudoLabelRecord>> {
    check_fraction(alpha)?;
    let mut order: Vec<(f64, usize)> = predictions
        .iter()
        .enumerate()
        .map(|(i, p)| (p.probs.confidence(), i))
        .collect();
    order.sort_by(|a, b| rank_order(*a, *b));
    let k = selection_count(alpha, predictions.len());
    order[..k]
        .iter()
        .map(|&(conf, i)| {
            let p = &predictions[i];
            PseudoLabelRecord::new(p.sample_id.clone(), Some(p.probs.argmax()), conf, source)
        })
        .collect()
}

/// Per-class top fraction over per-sample predictions. Output keeps input order.
pub fn class_balanced_select_records(
    predictions: &[Prediction],
    alpha: f64,
    source: &LabelSource,
) -> Result<Vec<PseudoLabelRecord>> {
    check_fraction(alpha)?;
    let classes = predictions.first().map_or(0, |p| p.probs.num_classes());
    let mut per_class: Vec<Vec<(f64, usize)>> = vec![Vec::new(); classes];
    for (i, p) in predictions.iter().enumerate() {
        per_class[p.probs.argmax()].push((p.probs.confidence(), i));
    }
    let mut keep = vec![false; predictions.len()];
    for mut members in per_class {
        let k = selection_count(alpha, members.len());
        members.sort_by(|a, b| rank_order(*a, *b));
        for &(_, i) in &members[..k] {
            keep[i] = true;
        }
    }
    predictions
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(p, _)| {
            PseudoLabelRecord::new(
                p.sample_id.clone(),
                Some(p.probs.argmax()),
                p.probs.confidence(),
                source,
            )
        })
        .collect()
}

fn check_maps(maps: &[ProbabilityMap]) -> Result<usize> {
    let classes = maps.first().map_or(0, |m| m.classes());
    if classes > IGNORE_LABEL as usize {
        return Err(DmtError::validation(format!(
            "{classes} classes do not fit an 8-bit label map"
        )));
    }
    if maps.iter().any(|m| m.classes() != classes) {
        return Err(DmtError::validation(
            "prediction maps disagree on the number of classes",
        ));
    }
    Ok(classes)
}

/// Class-balanced direct ranking over every pixel of every map: for each
/// class `c`, the `floor(alpha * n_c)` most confident pixels predicted as `c`
/// keep their label; all other pixels are ignored. Ties break by image order
/// then pixel index.
pub fn class_balanced_select(
    maps: &[ProbabilityMap],
    alpha: f64,
    source: &LabelSource,
) -> Result<Vec<PseudoLabelMap>> {
    check_fraction(alpha)?;
    let classes = check_maps(maps)?;

    let mut offsets = Vec::with_capacity(maps.len());
    let mut total = 0usize;
    for m in maps {
        offsets.push(total);
        total += m.num_pixels();
    }

    let mut argmax_class = vec![0u8; total];
    let mut confidence = vec![0f32; total];
    let mut per_class: Vec<Vec<(f64, usize)>> = vec![Vec::new(); classes];
    for (m, &off) in maps.iter().zip(&offsets) {
        for px in 0..m.num_pixels() {
            let (c, p) = m.pixel_argmax(px);
            argmax_class[off + px] = c as u8;
            confidence[off + px] = p;
            per_class[c].push((p as f64, off + px));
        }
    }

    let mut keep = vec![false; total];
    for mut members in per_class {
        let k = selection_count(alpha, members.len());
        if k == 0 {
            continue;
        }
        if k < members.len() {
            members.select_nth_unstable_by(k - 1, |a, b| rank_order(*a, *b));
        }
        for &(_, g) in &members[..k] {
            keep[g] = true;
        }
    }

    maps.iter()
        .zip(&offsets)
        .map(|(m, &off)| {
            let n = m.num_pixels();
            let labels = (0..n)
                .map(|px| {
                    if keep[off + px] {
                        argmax_class[off + px]
                    } else {
                        IGNORE_LABEL
                    }
                })
                .collect();
            PseudoLabelMap::new(
                m.sample_id(),
                m.height(),
                m.width(),
                labels,
                confidence[off..off + n].to_vec(),
                source,
            )
        })
        .collect()
}

/// Class-wise ranked thresholds: for class `c`, the confidence at rank
/// `floor(alpha * n_c)` (1-indexed, descending) among items predicted as `c`.
/// Classes with no selection get a threshold of 1.
pub fn cbst_thresholds(
    argmax_confidences: impl Iterator<Item = (usize, f64)>,
    classes: usize,
    alpha: f64,
) -> Result<Vec<f64>> {
    check_fraction(alpha)?;
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); classes];
    for (c, p) in argmax_confidences {
        per_class[c].push(p);
    }
    Ok(per_class
        .into_iter()
        .map(|mut confs| {
            let k = selection_count(alpha, confs.len());
            if k == 0 {
                return 1.0;
            }
            confs.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
            confs[k - 1]
        })
        .collect())
}

/// Divides a distribution class-wise by `thresholds` and returns the argmax
/// of the result together with its re-normalized value.
pub fn renormalize_with_thresholds(probs: &[f64], thresholds: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (c, (&p, &t)) in probs.iter().zip(thresholds).enumerate() {
        let v = p / t;
        if v > best_v {
            best = c;
            best_v = v;
        }
    }
    (best, best_v)
}

/// Threshold re-normalized selection over dense maps. A pixel is kept,
/// labeled with its re-normalized argmax, when that re-normalized value
/// exceeds 1; its recorded confidence is the original probability of that class.
pub fn cbst_renormalized_select(
    maps: &[ProbabilityMap],
    alpha: f64,
    source: &LabelSource,
) -> Result<Vec<PseudoLabelMap>> {
    let classes = check_maps(maps)?;
    let thresholds = cbst_thresholds(
        maps.iter().flat_map(|m| {
            (0..m.num_pixels()).map(move |px| {
                let (c, p) = m.pixel_argmax(px);
                (c, p as f64)
            })
        }),
        classes,
        alpha,
    )?;
    let mut probs = Vec::with_capacity(classes);
    maps.iter()
        .map(|m| {
            let n = m.num_pixels();
            let mut labels = vec![IGNORE_LABEL; n];
            let mut confs = vec![0f32; n];
            for px in 0..n {
                m.pixel_into(px, &mut probs);
                let (c, v) = renormalize_with_thresholds(&probs, &thresholds);
                if v > 1.0 {
                    labels[px] = c as u8;
                    confs[px] = probs[c] as f32;
                } else {
                    confs[px] = m.pixel_argmax(px).1;
                }
            }
            PseudoLabelMap::new(m.sample_id(), m.height(), m.width(), labels, confs, source)
        })
        .collect()
}

/// Threshold re-normalized selection over per-sample predictions. Output keeps input order.
pub fn cbst_renormalized_select_records(
    predictions: &[Prediction],
    alpha: f64,
    source: &LabelSource,
) -> Result<Vec<PseudoLabelRecord>> {
    let classes = predictions.first().map_or(0, |p| p.probs.num_classes());
    let thresholds = cbst_thresholds(
        predictions
            .iter()
            .map(|p| (p.probs.argmax(), p.probs.confidence())),
        classes,
        alpha,
    )?;
    let mut out = Vec::new();
    for p in predictions {
        let (c, v) = renormalize_with_thresholds(p.probs.as_slice(), &thresholds);
        if v > 1.0 {
            out.push(PseudoLabelRecord::new(
                p.sample_id.clone(),
                Some(c),
                p.probs.as_slice()[c],
                source,
            )?);
        }
    }
    Ok(out)
}
