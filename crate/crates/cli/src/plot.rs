//! Minimal raster plots. Axes and values go to a JSON file next to each
//! image, so the PNGs carry no text.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::ArrayView3;

use dmt_core::{DmtError, IGNORE_LABEL};

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

pub fn color(i: usize) -> Rgb<u8> {
    Rgb(PALETTE[i % PALETTE.len()])
}

fn save(img: &RgbImage, path: &Path) -> Result<(), DmtError> {
    img.save(path)
        .map_err(|e| DmtError::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

struct Frame {
    img: RgbImage,
    left: u32,
    top: u32,
    width: u32,
    height: u32,
}

impl Frame {
    fn new(width: u32, height: u32) -> Self {
        let (left, top) = (30, 20);
        let mut img = RgbImage::from_pixel(width + 2 * left, height + 2 * top, WHITE);
        for k in 1..=4 {
            let y = top + height - height * k / 4;
            for x in left..left + width {
                img.put_pixel(x, y, GRID);
            }
        }
        for x in left..=left + width {
            img.put_pixel(x, top + height, AXIS);
        }
        for y in top..=top + height {
            img.put_pixel(left, y, AXIS);
        }
        Frame {
            img,
            left,
            top,
            width,
            height,
        }
    }

    /// Pixel of a point with both coordinates in [0, 1].
    fn at(&self, x: f64, y: f64) -> (i64, i64) {
        let px = self.left as f64 + x.clamp(0.0, 1.0) * self.width as f64;
        let py = (self.top + self.height) as f64 - y.clamp(0.0, 1.0) * self.height as f64;
        (px.round() as i64, py.round() as i64)
    }

    fn dot(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (u, v) = (x + dx, y + dy);
                if u >= 0
                    && v >= 0
                    && (u as u32) < self.img.width()
                    && (v as u32) < self.img.height()
                {
                    self.img.put_pixel(u as u32, v as u32, c);
                }
            }
        }
    }

    fn segment(&mut self, a: (i64, i64), b: (i64, i64), c: Rgb<u8>) {
        let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = a.0 as f64 + t * (b.0 - a.0) as f64;
            let y = a.1 as f64 + t * (b.1 - a.1) as f64;
            self.dot(x.round() as i64, y.round() as i64, c);
        }
    }
}

/// One bar per value, scaled so that `top` fills the frame.
pub fn bars(path: &Path, values: &[f64], top: f64) -> Result<(), DmtError> {
    let mut f = Frame::new(60 * values.len().max(1) as u32, 240);
    let top = if top > 0.0 { top } else { 1.0 };
    for (i, &v) in values.iter().enumerate() {
        let x0 = f.left + 60 * i as u32 + 10;
        let (_, y) = f.at(0.0, v / top);
        for x in x0..x0 + 40 {
            for yy in (y.max(0) as u32)..(f.top + f.height) {
                f.img.put_pixel(x, yy, color(i));
            }
        }
    }
    save(&f.img, path)
}

/// Polylines over `x` in [0, x_max] and `y` in [y_min, y_max].
pub fn lines(
    path: &Path,
    series: &[Vec<(f64, f64)>],
    x_max: f64,
    y_range: (f64, f64),
) -> Result<(), DmtError> {
    let mut f = Frame::new(480, 300);
    let (lo, hi) = y_range;
    let span = if hi > lo { hi - lo } else { 1.0 };
    let xs = if x_max > 0.0 { x_max } else { 1.0 };
    for (k, s) in series.iter().enumerate() {
        let pts: Vec<(i64, i64)> = s
            .iter()
            .map(|&(x, y)| f.at(x / xs, (y - lo) / span))
            .collect();
        for w in pts.windows(2) {
            f.segment(w[0], w[1], color(k));
        }
        for &(x, y) in &pts {
            f.dot(x, y, color(k));
        }
    }
    save(&f.img, path)
}

fn heat(w: f64) -> Rgb<u8> {
    // dark blue for zero weight through yellow for full weight
    let t = w.clamp(0.0, 1.0);
    Rgb([
        (255.0 * t) as u8,
        (40.0 + 200.0 * t) as u8,
        (120.0 * (1.0 - t)) as u8,
    ])
}

/// Input image, pseudo labels (ignored pixels black) and per-pixel weights,
/// left to right, each scaled up by `zoom`.
pub fn weight_panels(
    path: &Path,
    image: ArrayView3<f32>,
    labels: &[u8],
    weights: &[f64],
    zoom: u32,
) -> Result<(), DmtError> {
    let (c, h, w) = image.dim();
    let (lo, hi) = image
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let gap = 4;
    let pw = w as u32 * zoom;
    let mut img = RgbImage::from_pixel(3 * pw + 2 * gap, h as u32 * zoom, WHITE);
    for y in 0..h {
        for x in 0..w {
            let px = y * w + x;
            let rgb: [u8; 3] = std::array::from_fn(|k| {
                let v = image[[k.min(c - 1), y, x]];
                (255.0 * (v - lo) / span) as u8
            });
            let label = match labels[px] {
                IGNORE_LABEL => Rgb([0, 0, 0]),
                l => color(l as usize),
            };
            let panels = [Rgb(rgb), label, heat(weights[px])];
            for (p, col) in panels.into_iter().enumerate() {
                let x0 = p as u32 * (pw + gap) + x as u32 * zoom;
                for dy in 0..zoom {
                    for dx in 0..zoom {
                        img.put_pixel(x0 + dx, y as u32 * zoom + dy, col);
                    }
                }
            }
        }
    }
    save(&img, path)
}
