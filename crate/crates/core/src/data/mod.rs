//! In-memory datasets, synthetic generators and the CIFAR-10 reader.

mod cifar;
mod moons;
mod toyseg;

use ndarray::{Array2, Array4, ArrayView2, Axis};

use crate::error::{DmtError, Result};

pub use cifar::{
    cifar_to_data, decode_cifar_record, encode_cifar_record, ingest_cifar10, ingest_cifar10_sized,
    read_cifar_batch, CifarRecord, CifarSplit, CIFAR_CLASSES, CIFAR_RECORDS_PER_FILE,
    CIFAR_RECORD_BYTES, CIFAR_SIDE, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES,
};
pub use moons::generate_two_moons;
pub use toyseg::{generate_toy_segmentation, ShapeInfo, ShapeKind, ToySegOptions};

/// Flat feature rows with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationData {
    pub features: Array2<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl ClassificationData {
    pub fn new(features: Array2<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(DmtError::validation(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DmtError::Index {
                index: bad,
                len: classes,
            });
        }
        Ok(ClassificationData {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows(&self, ids: &[usize]) -> Array2<f32> {
        self.features.select(Axis(0), ids)
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.features.view()
    }

    pub fn subset(&self, ids: &[usize]) -> ClassificationData {
        ClassificationData {
            features: self.rows(ids),
            labels: ids.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}

/// Images `[N, C, H, W]` with per-pixel class masks (255 = ignore).
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationData {
    pub images: Array4<f32>,
    pub masks: Vec<Vec<u8>>,
    pub classes: usize,
}

impl SegmentationData {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn height(&self) -> usize {
        self.images.dim().2
    }

    pub fn width(&self) -> usize {
        self.images.dim().3
    }

    pub fn channels(&self) -> usize {
        self.images.dim().1
    }

    pub fn subset(&self, ids: &[usize]) -> SegmentationData {
        SegmentationData {
            images: self.images.select(Axis(0), ids),
            masks: ids.iter().map(|&i| self.masks[i].clone()).collect(),
            classes: self.classes,
        }
    }

    /// Label of the most frequent non-background class in each mask, or 0.
    /// Used to stratify image-level splits.
    pub fn dominant_classes(&self) -> Vec<usize> {
        self.masks
            .iter()
            .map(|m| {
                let mut counts = vec![0usize; self.classes];
                for &l in m {
                    if (l as usize) < self.classes {
                        counts[l as usize] += 1;
                    }
                }
                (1..self.classes)
                    .filter(|&c| counts[c] > 0)
                    .max_by_key(|&c| (counts[c], std::cmp::Reverse(c)))
                    .unwrap_or(0)
            })
            .collect()
    }
}
