use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SegmentationData;
use crate::error::{DmtError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Rectangle,
    Disc,
}

/// A drawn shape, in drawing order (later shapes overwrite earlier ones).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeInfo {
    pub kind: ShapeKind,
    pub class: usize,
    /// Top-left corner for rectangles, centre for discs.
    pub row: usize,
    pub col: usize,
    /// Height/width for rectangles; `size.0` is the radius for discs.
    pub size: (usize, usize),
    /// Pixels covered when drawn onto an empty canvas.
    pub area: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySegOptions {
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Per-pixel Gaussian colour noise.
    pub pixel_noise: f64,
    /// Per-image colour shift applied to every shape.
    pub color_jitter: f64,
}

impl Default for ToySegOptions {
    fn default() -> Self {
        ToySegOptions {
            min_shapes: 1,
            max_shapes: 3,
            pixel_noise: 0.35,
            color_jitter: 0.25,
        }
    }
}

/// Base colour of each class; background is class 0.
fn palette(class: usize, classes: usize) -> [f32; 3] {
    if class == 0 {
        return [0.0, 0.0, 0.0];
    }
    let hue = (class - 1) as f32 / (classes - 1).max(1) as f32;
    let h = hue * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b]
}

fn draw_shape(
    mask: &mut [u8],
    grid: usize,
    kind: ShapeKind,
    class: u8,
    row: usize,
    col: usize,
    size: (usize, usize),
) -> usize {
    let mut area = 0;
    match kind {
        ShapeKind::Rectangle => {
            for r in row..row + size.0 {
                for c in col..col + size.1 {
                    mask[r * grid + c] = class;
                    area += 1;
                }
            }
        }
        ShapeKind::Disc => {
            let rad = size.0 as isize;
            for r in 0..grid as isize {
                for c in 0..grid as isize {
                    let dr = r - row as isize;
                    let dc = c - col as isize;
                    if dr * dr + dc * dc <= rad * rad {
                        mask[r as usize * grid + c as usize] = class;
                        area += 1;
                    }
                }
            }
        }
    }
    area
}

/// Images of randomly placed coloured rectangles and discs on a noisy
/// background, with exact per-pixel class masks.
///
/// Returns the dataset and, per image, the shapes that were drawn.
pub fn generate_toy_segmentation(
    n: usize,
    grid: usize,
    classes: usize,
    seed: u64,
    options: &ToySegOptions,
) -> Result<(SegmentationData, Vec<Vec<ShapeInfo>>)> {
    if classes < 2 {
        return Err(DmtError::validation(format!(
            "toy segmentation needs at least 2 classes, got {classes}"
        )));
    }
    if classes > 255 {
        return Err(DmtError::validation(
            "at most 255 classes fit an 8-bit mask",
        ));
    }
    if options.min_shapes > options.max_shapes {
        return Err(DmtError::validation("min_shapes exceeds max_shapes"));
    }
    if grid < 2 {
        return Err(DmtError::validation(format!(
            "a {grid}x{grid} grid cannot fit any shape"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixel_noise = Normal::new(0.0, options.pixel_noise.max(f64::MIN_POSITIVE)).unwrap();
    let jitter = Normal::new(0.0, options.color_jitter.max(f64::MIN_POSITIVE)).unwrap();
    let plane = grid * grid;
    let mut images = Array4::<f32>::zeros((n, 3, grid, grid));
    let mut masks = Vec::with_capacity(n);
    let mut shapes = Vec::with_capacity(n);

    for i in 0..n {
        let mut mask = vec![0u8; plane];
        let mut drawn = Vec::new();
        let count = rng.random_range(options.min_shapes..=options.max_shapes);
        for _ in 0..count {
            let class = rng.random_range(1..classes);
            let kind = if rng.random_bool(0.5) {
                ShapeKind::Rectangle
            } else {
                ShapeKind::Disc
            };
            // preferred size range, halved until the shape fits the grid
            let mut max_extent = (grid / 3).max(1);
            let mut min_extent = (grid / 6).max(1);
            loop {
                let needed = match kind {
                    ShapeKind::Rectangle => min_extent,
                    ShapeKind::Disc => 2 * min_extent + 1,
                };
                if needed <= grid {
                    break;
                }
                if min_extent == 1 {
                    return Err(DmtError::validation(format!(
                        "shapes cannot fit a {grid}x{grid} grid"
                    )));
                }
                min_extent = (min_extent / 2).max(1);
                max_extent = (max_extent / 2).max(min_extent);
            }
            let (row, col, size) = match kind {
                ShapeKind::Rectangle => {
                    let h = rng.random_range(min_extent..=max_extent.min(grid));
                    let w = rng.random_range(min_extent..=max_extent.min(grid));
                    let r = rng.random_range(0..=grid - h);
                    let c = rng.random_range(0..=grid - w);
                    (r, c, (h, w))
                }
                ShapeKind::Disc => {
                    let max_r = max_extent.min((grid - 1) / 2).max(min_extent / 2);
                    let rad = rng.random_range((min_extent / 2).max(1).min(max_r)..=max_r);
                    let r = rng.random_range(rad..grid - rad);
                    let c = rng.random_range(rad..grid - rad);
                    (r, c, (rad, rad))
                }
            };
            let area = draw_shape(&mut mask, grid, kind, class as u8, row, col, size);
            drawn.push(ShapeInfo {
                kind,
                class,
                row,
                col,
                size,
                area,
            });
        }

        let shift: [f32; 3] = [
            jitter.sample(&mut rng) as f32,
            jitter.sample(&mut rng) as f32,
            jitter.sample(&mut rng) as f32,
        ];
        for px in 0..plane {
            let class = mask[px] as usize;
            let base = palette(class, classes);
            for ch in 0..3 {
                let offset = if class == 0 { 0.0 } else { shift[ch] };
                let v = base[ch] + offset + pixel_noise.sample(&mut rng) as f32;
                images[[i, ch, px / grid, px % grid]] = v;
            }
        }
        masks.push(mask);
        shapes.push(drawn);
    }
    Ok((
        SegmentationData {
            images,
            masks,
            classes,
        },
        shapes,
    ))
}
