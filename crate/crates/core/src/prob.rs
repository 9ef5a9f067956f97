//! Per-class probability containers for single samples and dense maps.

use serde::{Deserialize, Serialize};

use crate::error::{DmtError, Result};

/// Tolerance on the sum of a probability vector.
pub const SUM_TOLERANCE: f64 = 1e-5;

/// Index of the largest entry. Ties resolve to the lowest index.
pub fn argmax<T: Copy + PartialOrd>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax in double precision.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// In-place softmax over a single-precision slice.
pub fn softmax_in_place(values: &mut [f32]) {
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0f32;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in values.iter_mut() {
        *v /= total;
    }
}

/// A validated categorical distribution over `C` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(DmtError::validation("probability vector has no classes"));
        }
        for (i, p) in probs.iter().enumerate() {
            if !p.is_finite() || *p < 0.0 || *p > 1.0 {
                return Err(DmtError::validation(format!(
                    "probability {p} at class {i} is outside [0, 1]"
                )));
            }
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(DmtError::validation(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(ProbabilityVector(probs))
    }

    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        Self::new(softmax(logits))
    }

    /// Uniform distribution over `classes` classes.
    pub fn uniform(classes: usize) -> Self {
        ProbabilityVector(vec![1.0 / classes as f64; classes.max(1)])
    }

    pub fn one_hot(classes: usize, class: usize) -> Result<Self> {
        if class >= classes {
            return Err(DmtError::Index {
                index: class,
                len: classes,
            });
        }
        let mut v = vec![0.0; classes];
        v[class] = 1.0;
        Ok(ProbabilityVector(v))
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, class: usize) -> Result<f64> {
        self.0.get(class).copied().ok_or(DmtError::Index {
            index: class,
            len: self.0.len(),
        })
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    /// Maximum probability (the prediction confidence).
    pub fn confidence(&self) -> f64 {
        self.0[self.argmax()]
    }
}

impl TryFrom<Vec<f64>> for ProbabilityVector {
    type Error = DmtError;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        ProbabilityVector::new(value)
    }
}

impl From<ProbabilityVector> for Vec<f64> {
    fn from(value: ProbabilityVector) -> Self {
        value.0
    }
}

/// Dense per-pixel class probabilities, stored channel-major as `[C][H][W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    sample_id: String,
    classes: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(
        sample_id: impl Into<String>,
        classes: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if classes == 0 || height == 0 || width == 0 {
            return Err(DmtError::validation(
                "probability map has an empty dimension",
            ));
        }
        if data.len() != classes * height * width {
            return Err(DmtError::validation(format!(
                "probability map data has {} values, expected {}",
                data.len(),
                classes * height * width
            )));
        }
        let map = ProbabilityMap {
            sample_id: sample_id.into(),
            classes,
            height,
            width,
            data,
        };
        let plane = height * width;
        for px in 0..plane {
            let mut total = 0.0f64;
            for c in 0..classes {
                let p = map.data[c * plane + px];
                if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                    return Err(DmtError::validation(format!(
                        "pixel {px} class {c} probability {p} outside [0, 1]"
                    )));
                }
                total += p as f64;
            }
            if (total - 1.0).abs() > 1e-4 {
                return Err(DmtError::validation(format!(
                    "pixel {px} probabilities sum to {total}"
                )));
            }
        }
        Ok(map)
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Probability of `class` at flat pixel index `px` (row-major).
    #[inline]
    pub fn prob(&self, class: usize, px: usize) -> f32 {
        self.data[class * self.num_pixels() + px]
    }

    /// Copies the distribution at pixel `px` into `out`.
    pub fn pixel_into(&self, px: usize, out: &mut Vec<f64>) {
        out.clear();
        let plane = self.num_pixels();
        out.extend((0..self.classes).map(|c| self.data[c * plane + px] as f64));
    }

    /// Argmax class and its probability at pixel `px`.
    pub fn pixel_argmax(&self, px: usize) -> (usize, f32) {
        let plane = self.num_pixels();
        let mut best = 0;
        let mut best_p = self.data[px];
        for c in 1..self.classes {
            let p = self.data[c * plane + px];
            if p > best_p {
                best = c;
                best_p = p;
            }
        }
        (best, best_p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_resolve_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn rejects_bad_vectors() {
        assert!(ProbabilityVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbabilityVector::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbabilityVector::new(vec![]).is_err());
        assert!(ProbabilityVector::new(vec![0.3, 0.7]).is_ok());
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0, 2.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(argmax(&p), 2);
    }

    #[test]
    fn map_pixel_access() {
        let map = ProbabilityMap::new("m", 2, 1, 2, vec![0.2, 0.9, 0.8, 0.1]).unwrap();
        assert_eq!(map.pixel_argmax(0), (1, 0.8));
        assert_eq!(map.pixel_argmax(1), (0, 0.9));
        assert!(ProbabilityMap::new("m", 2, 1, 2, vec![0.2, 0.9, 0.9, 0.1]).is_err());
    }
}
