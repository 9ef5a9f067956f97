use ndarray::{s, Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::pseudo_label::IGNORE_LABEL;

/// Per-sample augmentation for classification batches stored as flat rows.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassAugment {
    None,
    /// Adds Gaussian noise of this standard deviation to every feature.
    Jitter {
        std: f32,
    },
    /// One operation from [`ImageOp::ALL`] at a uniformly random intensity,
    /// optionally followed by cutout of half the image side.
    RandomOp {
        channels: usize,
        height: usize,
        width: usize,
        cutout: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageOp {
    Identity,
    FlipHorizontal,
    Translate,
    Brightness,
    Contrast,
    Noise,
}

impl ImageOp {
    pub const ALL: [ImageOp; 6] = [
        ImageOp::Identity,
        ImageOp::FlipHorizontal,
        ImageOp::Translate,
        ImageOp::Brightness,
        ImageOp::Contrast,
        ImageOp::Noise,
    ];
}

impl ClassAugment {
    pub fn apply<R: Rng + ?Sized>(&self, rows: &mut Array2<f32>, rng: &mut R) {
        match *self {
            ClassAugment::None => {}
            ClassAugment::Jitter { std } => {
                for v in rows.iter_mut() {
                    let z: f32 = StandardNormal.sample(rng);
                    *v += std * z;
                }
            }
            ClassAugment::RandomOp {
                channels,
                height,
                width,
                cutout,
            } => {
                for row in rows.axis_iter_mut(Axis(0)) {
                    let op = ImageOp::ALL[rng.random_range(0..ImageOp::ALL.len())];
                    let intensity: f32 = rng.random();
                    let mut img = row
                        .into_shape_with_order((channels, height, width))
                        .expect("row matches image shape");
                    apply_image_op(&mut img, op, intensity, rng);
                    if cutout {
                        cutout_square(&mut img, height.min(width) / 2, rng);
                    }
                }
            }
        }
    }
}

fn apply_image_op<R: Rng + ?Sized>(
    img: &mut ndarray::ArrayViewMut3<f32>,
    op: ImageOp,
    intensity: f32,
    rng: &mut R,
) {
    let (_, h, w) = img.dim();
    match op {
        ImageOp::Identity => {}
        ImageOp::FlipHorizontal => img.invert_axis(Axis(2)),
        ImageOp::Translate => {
            let max = (intensity * (w.min(h) as f32) / 8.0).round() as i64;
            let dy = rng.random_range(-max..=max) as isize;
            let dx = rng.random_range(-max..=max) as isize;
            let src = img.to_owned();
            for ((c, y, x), v) in img.indexed_iter_mut() {
                let sy = y as isize - dy;
                let sx = x as isize - dx;
                *v = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    src[[c, sy as usize, sx as usize]]
                } else {
                    0.0
                };
            }
        }
        ImageOp::Brightness => {
            let delta = intensity * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            img.mapv_inplace(|v| v + delta);
        }
        ImageOp::Contrast => {
            let factor = 1.0 + 0.5 * intensity * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            for mut plane in img.axis_iter_mut(Axis(0)) {
                let mean = plane.mean().unwrap_or(0.0);
                plane.mapv_inplace(|v| mean + factor * (v - mean));
            }
        }
        ImageOp::Noise => {
            let std = 0.3 * intensity;
            img.mapv_inplace(|v| {
                let z: f32 = StandardNormal.sample(rng);
                v + std * z
            });
        }
    }
}

/// Zeroes a `side x side` square at a random centre, clipped to the image.
fn cutout_square<R: Rng + ?Sized>(img: &mut ndarray::ArrayViewMut3<f32>, side: usize, rng: &mut R) {
    let (_, h, w) = img.dim();
    if side == 0 {
        return;
    }
    let cy = rng.random_range(0..h) as isize;
    let cx = rng.random_range(0..w) as isize;
    let half = side as isize / 2;
    let y0 = (cy - half).max(0) as usize;
    let x0 = (cx - half).max(0) as usize;
    let y1 = ((cy - half + side as isize).min(h as isize)) as usize;
    let x1 = ((cx - half + side as isize).min(w as isize)) as usize;
    img.slice_mut(s![.., y0..y1, x0..x1]).fill(0.0);
}

/// Image with its aligned label and confidence maps.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    /// `[C, H, W]`.
    pub image: Array3<f32>,
    /// Row-major `H * W`, 255 = ignore.
    pub labels: Vec<u8>,
    /// Row-major `H * W`.
    pub confidences: Vec<f32>,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.image.dim().1
    }

    pub fn width(&self) -> usize {
        self.image.dim().2
    }
}

/// Random scale, crop and horizontal flip, applied identically to the
/// image and both maps.
#[derive(Debug, Clone, PartialEq)]
pub struct SegAugment {
    pub min_scale: f32,
    pub max_scale: f32,
    /// Square output side; smaller inputs are padded first.
    pub crop: Option<usize>,
    pub flip: bool,
}

impl SegAugment {
    pub fn identity() -> Self {
        SegAugment {
            min_scale: 1.0,
            max_scale: 1.0,
            crop: None,
            flip: false,
        }
    }

    pub fn standard(crop: Option<usize>) -> Self {
        SegAugment {
            min_scale: 0.75,
            max_scale: 1.25,
            crop,
            flip: true,
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, sample: &SegSample, rng: &mut R) -> SegSample {
        let mut out = if self.max_scale > self.min_scale || self.min_scale != 1.0 {
            let s = if self.max_scale > self.min_scale {
                rng.random_range(self.min_scale..=self.max_scale)
            } else {
                self.min_scale
            };
            rescale(sample, s)
        } else {
            sample.clone()
        };
        if let Some(side) = self.crop {
            out = pad_to(&out, side);
            let y0 = rng.random_range(0..=out.height() - side);
            let x0 = rng.random_range(0..=out.width() - side);
            out = crop(&out, y0, x0, side, side);
        }
        if self.flip && rng.random_bool(0.5) {
            out = flip_horizontal(&out);
        }
        out
    }
}

fn rescale(sample: &SegSample, scale: f32) -> SegSample {
    let (c, h, w) = sample.image.dim();
    let nh = ((h as f32 * scale).round() as usize).max(1);
    let nw = ((w as f32 * scale).round() as usize).max(1);
    if (nh, nw) == (h, w) {
        return sample.clone();
    }
    let ry = h as f32 / nh as f32;
    let rx = w as f32 / nw as f32;
    let mut image = Array3::zeros((c, nh, nw));
    for y in 0..nh {
        let sy = ((y as f32 + 0.5) * ry - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f32;
        for x in 0..nw {
            let sx = ((x as f32 + 0.5) * rx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f32;
            for ch in 0..c {
                let top = sample.image[[ch, y0, x0]] * (1.0 - fx) + sample.image[[ch, y0, x1]] * fx;
                let bot = sample.image[[ch, y1, x0]] * (1.0 - fx) + sample.image[[ch, y1, x1]] * fx;
                image[[ch, y, x]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    let mut labels = vec![0u8; nh * nw];
    let mut confidences = vec![0f32; nh * nw];
    for y in 0..nh {
        let sy = (((y as f32 + 0.5) * ry) as usize).min(h - 1);
        for x in 0..nw {
            let sx = (((x as f32 + 0.5) * rx) as usize).min(w - 1);
            labels[y * nw + x] = sample.labels[sy * w + sx];
            confidences[y * nw + x] = sample.confidences[sy * w + sx];
        }
    }
    SegSample {
        image,
        labels,
        confidences,
    }
}

fn pad_to(sample: &SegSample, side: usize) -> SegSample {
    let (c, h, w) = sample.image.dim();
    if h >= side && w >= side {
        return sample.clone();
    }
    let (nh, nw) = (h.max(side), w.max(side));
    let mut image = Array3::zeros((c, nh, nw));
    image.slice_mut(s![.., ..h, ..w]).assign(&sample.image);
    let mut labels = vec![IGNORE_LABEL; nh * nw];
    let mut confidences = vec![0f32; nh * nw];
    for y in 0..h {
        labels[y * nw..y * nw + w].copy_from_slice(&sample.labels[y * w..(y + 1) * w]);
        confidences[y * nw..y * nw + w].copy_from_slice(&sample.confidences[y * w..(y + 1) * w]);
    }
    SegSample {
        image,
        labels,
        confidences,
    }
}

fn crop(sample: &SegSample, y0: usize, x0: usize, ch: usize, cw: usize) -> SegSample {
    let w = sample.width();
    let image = sample
        .image
        .slice(s![.., y0..y0 + ch, x0..x0 + cw])
        .to_owned();
    let mut labels = Vec::with_capacity(ch * cw);
    let mut confidences = Vec::with_capacity(ch * cw);
    for y in y0..y0 + ch {
        labels.extend_from_slice(&sample.labels[y * w + x0..y * w + x0 + cw]);
        confidences.extend_from_slice(&sample.confidences[y * w + x0..y * w + x0 + cw]);
    }
    SegSample {
        image,
        labels,
        confidences,
    }
}

pub fn flip_horizontal(sample: &SegSample) -> SegSample {
    let w = sample.width();
    let mut image = sample.image.clone();
    image.invert_axis(Axis(2));
    let image = image.as_standard_layout().into_owned();
    let flip_rows = |v: &mut [u8]| v.chunks_mut(w).for_each(|r| r.reverse());
    let mut labels = sample.labels.clone();
    flip_rows(&mut labels);
    let mut confidences = sample.confidences.clone();
    confidences.chunks_mut(w).for_each(|r| r.reverse());
    SegSample {
        image,
        labels,
        confidences,
    }
}
