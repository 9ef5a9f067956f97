use std::f64::consts::PI;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ClassificationData;
use crate::error::{DmtError, Result};

/// Two interleaving half-circles with isotropic Gaussian noise.
///
/// Class 0 lies on the upper unit half-circle, class 1 on the lower one
/// shifted to `(1, 0.5)`. Angles are evenly spaced; row order is shuffled.
pub fn generate_two_moons(n: usize, noise_std: f64, seed: u64) -> Result<ClassificationData> {
    if n < 2 {
        return Err(DmtError::validation(format!(
            "two moons needs n >= 2, got {n}"
        )));
    }
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(DmtError::validation("noise std must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_upper = n.div_ceil(2);
    let n_lower = n - n_upper;
    let spaced = |k: usize, i: usize| {
        if k <= 1 {
            0.0
        } else {
            PI * i as f64 / (k - 1) as f64
        }
    };
    let mut points: Vec<(f64, f64, usize)> = Vec::with_capacity(n);
    for i in 0..n_upper {
        let t = spaced(n_upper, i);
        points.push((t.cos(), t.sin(), 0));
    }
    for i in 0..n_lower {
        let t = spaced(n_lower, i);
        points.push((1.0 - t.cos(), 0.5 - t.sin(), 1));
    }
    points.shuffle(&mut rng);
    let normal = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut features = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for (i, (x, y, c)) in points.into_iter().enumerate() {
        let (dx, dy) = if noise_std > 0.0 {
            (normal.sample(&mut rng), normal.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        features[[i, 0]] = (x + dx) as f32;
        features[[i, 1]] = (y + dy) as f32;
        labels.push(c);
    }
    ClassificationData::new(features, labels, 2)
}
