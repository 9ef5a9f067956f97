//! Layers with hand-written backward passes.
//!
//! Every layer's forward is a pure function of its parameters and input; the
//! returned cache is what its backward pass needs.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix2, Ix4, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Fully connected layer, `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub(crate) weight: Array2<f32>,
    pub(crate) bias: Array1<f32>,
    pub(crate) grad_weight: Array2<f32>,
    pub(crate) grad_bias: Array1<f32>,
}

/// 2-D convolution, stride 1, "same" padding, square odd kernel.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub(crate) in_channels: usize,
    pub(crate) kernel: usize,
    /// `[out_channels, in_channels * kernel * kernel]`
    pub(crate) weight: Array2<f32>,
    pub(crate) bias: Array1<f32>,
    pub(crate) grad_weight: Array2<f32>,
    pub(crate) grad_bias: Array1<f32>,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Linear(Linear),
    Conv2d(Conv2d),
    Relu,
    /// 2x2 max pooling with stride 2.
    MaxPool2,
    /// `[B, C, H, W] -> [B, C]`
    GlobalAvgPool,
}

#[derive(Debug, Clone)]
pub(crate) enum Cache {
    Linear {
        input: Array2<f32>,
    },
    Conv {
        cols: Array2<f32>,
        input_dim: [usize; 4],
    },
    Relu {
        mask: Vec<bool>,
    },
    MaxPool {
        argmax: Vec<usize>,
        input_dim: [usize; 4],
    },
    GlobalAvgPool {
        input_dim: [usize; 4],
    },
}

fn he_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Array2<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng) as f32)
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: he_normal(rng, outputs, inputs, inputs),
            bias: Array1::zeros(outputs),
            grad_weight: Array2::zeros((outputs, inputs)),
            grad_bias: Array1::zeros(outputs),
        }
    }

    fn forward(&self, x: Array2<f32>) -> (Array2<f32>, Array2<f32>) {
        let y = x.dot(&self.weight.t()) + &self.bias;
        (y, x)
    }

    fn backward(&mut self, input: &Array2<f32>, grad: Array2<f32>) -> Array2<f32> {
        self.grad_weight += &grad.t().dot(input);
        self.grad_bias += &grad.sum_axis(Axis(0));
        grad.dot(&self.weight)
    }
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            in_channels,
            kernel,
            weight: he_normal(rng, out_channels, fan_in, fan_in),
            bias: Array1::zeros(out_channels),
            grad_weight: Array2::zeros((out_channels, fan_in)),
            grad_bias: Array1::zeros(out_channels),
        }
    }

    fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    fn im2col(&self, x: &Array4<f32>) -> Array2<f32> {
        let (b, c, h, w) = x.dim();
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let width = c * k * k;
        let mut cols = vec![0f32; b * h * w * width];
        let xs = x.as_slice().expect("standard layout input");
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let row = ((bi * h + y) * w + xx) * width;
                    for ci in 0..c {
                        let plane = (bi * c + ci) * h * w;
                        for ky in 0..k {
                            let sy = y as isize + ky as isize - pad;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let src_row = plane + sy as usize * w;
                            let dst = row + (ci * k + ky) * k;
                            for kx in 0..k {
                                let sx = xx as isize + kx as isize - pad;
                                if sx >= 0 && sx < w as isize {
                                    cols[dst + kx] = xs[src_row + sx as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((b * h * w, width), cols).expect("im2col shape")
    }

    fn col2im(&self, cols: &Array2<f32>, dim: [usize; 4]) -> Array4<f32> {
        let [b, c, h, w] = dim;
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let width = c * k * k;
        let cs = cols.as_slice().expect("standard layout cols");
        let mut out = vec![0f32; b * c * h * w];
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let row = ((bi * h + y) * w + xx) * width;
                    for ci in 0..c {
                        let plane = (bi * c + ci) * h * w;
                        for ky in 0..k {
                            let sy = y as isize + ky as isize - pad;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let dst_row = plane + sy as usize * w;
                            let src = row + (ci * k + ky) * k;
                            for kx in 0..k {
                                let sx = xx as isize + kx as isize - pad;
                                if sx >= 0 && sx < w as isize {
                                    out[dst_row + sx as usize] += cs[src + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        Array4::from_shape_vec((b, c, h, w), out).expect("col2im shape")
    }

    fn forward(&self, x: Array4<f32>) -> (Array4<f32>, Array2<f32>) {
        let (b, c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_channels);
        let cols = self.im2col(&x.as_standard_layout().into_owned());
        let out = cols.dot(&self.weight.t()) + &self.bias;
        let out = out
            .into_shape_with_order((b, h, w, self.out_channels()))
            .expect("conv output shape")
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .into_owned();
        (out, cols)
    }

    fn backward(&mut self, cols: &Array2<f32>, dim: [usize; 4], grad: Array4<f32>) -> Array4<f32> {
        let [b, _, h, w] = dim;
        let g2 = grad
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b * h * w, self.out_channels()))
            .expect("conv grad shape");
        self.grad_weight += &g2.t().dot(cols);
        self.grad_bias += &g2.sum_axis(Axis(0));
        let dcols = g2.dot(&self.weight);
        self.col2im(&dcols, dim)
    }
}

fn dim4(x: &ArrayD<f32>) -> [usize; 4] {
    let s = x.shape();
    [s[0], s[1], s[2], s[3]]
}

impl Layer {
    pub(crate) fn forward(&self, x: ArrayD<f32>) -> (ArrayD<f32>, Cache) {
        match self {
            Layer::Linear(l) => {
                let x2 = x
                    .into_dimensionality::<Ix2>()
                    .expect("linear expects [B, D]");
                let (y, input) = l.forward(x2);
                (y.into_dyn(), Cache::Linear { input })
            }
            Layer::Conv2d(c) => {
                let dim = dim4(&x);
                let x4 = x
                    .into_dimensionality::<Ix4>()
                    .expect("conv expects [B, C, H, W]");
                let (y, cols) = c.forward(x4);
                (
                    y.into_dyn(),
                    Cache::Conv {
                        cols,
                        input_dim: dim,
                    },
                )
            }
            Layer::Relu => {
                let mut x = x;
                let mut mask = Vec::with_capacity(x.len());
                x.mapv_inplace(|v| {
                    let on = v > 0.0;
                    mask.push(on);
                    if on {
                        v
                    } else {
                        0.0
                    }
                });
                (x, Cache::Relu { mask })
            }
            Layer::MaxPool2 => {
                let dim = dim4(&x);
                let [b, c, h, w] = dim;
                let (oh, ow) = (h / 2, w / 2);
                let xs = x.as_standard_layout();
                let xs = xs.as_slice().expect("contiguous");
                let mut out = vec![0f32; b * c * oh * ow];
                let mut argmax = vec![0usize; out.len()];
                for p in 0..b * c {
                    let base = p * h * w;
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut best = base + 2 * y * w + 2 * xx;
                            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                                if xs[idx] > xs[best] {
                                    best = idx;
                                }
                            }
                            let o = (p * oh + y) * ow + xx;
                            out[o] = xs[best];
                            argmax[o] = best;
                        }
                    }
                }
                let y = ArrayD::from_shape_vec(IxDyn(&[b, c, oh, ow]), out).expect("pool shape");
                (
                    y,
                    Cache::MaxPool {
                        argmax,
                        input_dim: dim,
                    },
                )
            }
            Layer::GlobalAvgPool => {
                let dim = dim4(&x);
                let [b, c, h, w] = dim;
                let x4 = x
                    .into_dimensionality::<Ix4>()
                    .expect("gap expects [B, C, H, W]");
                let y = x4
                    .into_shape_with_order((b, c, h * w))
                    .expect("gap reshape")
                    .mean_axis(Axis(2))
                    .expect("non-empty spatial dims");
                (y.into_dyn(), Cache::GlobalAvgPool { input_dim: dim })
            }
        }
    }

    pub(crate) fn backward(&mut self, cache: &Cache, grad: ArrayD<f32>) -> ArrayD<f32> {
        match (self, cache) {
            (Layer::Linear(l), Cache::Linear { input }) => {
                let g = grad.into_dimensionality::<Ix2>().expect("linear grad");
                l.backward(input, g).into_dyn()
            }
            (Layer::Conv2d(c), Cache::Conv { cols, input_dim }) => {
                let g = grad.into_dimensionality::<Ix4>().expect("conv grad");
                c.backward(cols, *input_dim, g).into_dyn()
            }
            (Layer::Relu, Cache::Relu { mask }) => {
                let mut g = grad.as_standard_layout().into_owned();
                for (v, &on) in g.iter_mut().zip(mask) {
                    if !on {
                        *v = 0.0;
                    }
                }
                g
            }
            (Layer::MaxPool2, Cache::MaxPool { argmax, input_dim }) => {
                let g = grad.as_standard_layout();
                let gs = g.as_slice().expect("contiguous");
                let mut out = vec![0f32; input_dim.iter().product()];
                for (&src, &v) in argmax.iter().zip(gs) {
                    out[src] += v;
                }
                ArrayD::from_shape_vec(IxDyn(input_dim), out).expect("pool grad shape")
            }
            (Layer::GlobalAvgPool, Cache::GlobalAvgPool { input_dim }) => {
                let [b, c, h, w] = *input_dim;
                let g = grad.into_dimensionality::<Ix2>().expect("gap grad");
                let scale = 1.0 / (h * w) as f32;
                let out = Array4::from_shape_fn((b, c, h, w), |(bi, ci, _, _)| g[[bi, ci]] * scale);
                out.into_dyn()
            }
            _ => unreachable!("layer/cache mismatch"),
        }
    }

    pub(crate) fn params(&self) -> Vec<&[f32]> {
        match self {
            Layer::Linear(l) => vec![
                l.weight.as_slice().expect("contiguous"),
                l.bias.as_slice().expect("contiguous"),
            ],
            Layer::Conv2d(c) => vec![
                c.weight.as_slice().expect("contiguous"),
                c.bias.as_slice().expect("contiguous"),
            ],
            _ => Vec::new(),
        }
    }

    pub(crate) fn params_and_grads_mut(&mut self) -> Vec<(&mut [f32], &mut [f32])> {
        match self {
            Layer::Linear(l) => vec![
                (
                    l.weight.as_slice_mut().expect("contiguous"),
                    l.grad_weight.as_slice_mut().expect("contiguous"),
                ),
                (
                    l.bias.as_slice_mut().expect("contiguous"),
                    l.grad_bias.as_slice_mut().expect("contiguous"),
                ),
            ],
            Layer::Conv2d(c) => vec![
                (
                    c.weight.as_slice_mut().expect("contiguous"),
                    c.grad_weight.as_slice_mut().expect("contiguous"),
                ),
                (
                    c.bias.as_slice_mut().expect("contiguous"),
                    c.grad_bias.as_slice_mut().expect("contiguous"),
                ),
            ],
            _ => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Dimension;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Finite-difference check of a layer's input gradient against the
    /// scalar objective `sum(y * probe)`.
    fn check_input_grad(layer: Layer, x: ArrayD<f32>) {
        let mut layer = layer;
        let (y, cache) = layer.forward(x.clone());
        let probe = ArrayD::from_shape_fn(y.raw_dim(), |idx| {
            let s: usize = idx.slice().iter().sum();
            ((s % 7) as f32 - 3.0) * 0.25
        });
        let analytic = layer.backward(&cache, probe.clone());
        let objective = |input: ArrayD<f32>| -> f64 {
            let (y, _) = layer.forward(input);
            y.iter()
                .zip(probe.iter())
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum()
        };
        let h = 1e-2f32;
        for i in (0..x.len()).step_by(3) {
            let mut plus = x.clone();
            plus.as_slice_mut().unwrap()[i] += h;
            let mut minus = x.clone();
            minus.as_slice_mut().unwrap()[i] -= h;
            let fd = (objective(plus) - objective(minus)) / (2.0 * h as f64);
            let an = analytic.as_slice().unwrap()[i] as f64;
            assert!(
                (fd - an).abs() < 2e-2 * (1.0 + fd.abs()),
                "i={i} fd={fd} an={an}"
            );
        }
    }

    #[test]
    fn conv_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::new(&mut rng, 2, 3, 3);
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 2, 4, 5]), |i| {
            let s: usize = i.slice().iter().enumerate().map(|(k, v)| (k + 1) * v).sum();
            (s as f32 * 0.37).sin()
        });
        check_input_grad(Layer::Conv2d(conv), x);
    }

    #[test]
    fn linear_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lin = Linear::new(&mut rng, 5, 3);
        let x = ArrayD::from_shape_fn(IxDyn(&[4, 5]), |i| (i[0] as f32 - i[1] as f32) * 0.3);
        check_input_grad(Layer::Linear(lin), x);
    }

    #[test]
    fn gap_input_gradient() {
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 3, 2, 2]), |i| i[3] as f32 + 0.5 * i[1] as f32);
        check_input_grad(Layer::GlobalAvgPool, x);
    }

    #[test]
    fn maxpool_routes_gradient() {
        let x = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1.0, 4.0, 2.0, 3.0]).unwrap();
        let mut layer = Layer::MaxPool2;
        let (y, cache) = layer.forward(x);
        assert_eq!(y.as_slice().unwrap(), &[4.0]);
        let g = layer.backward(&cache, ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 2.0));
        assert_eq!(g.as_slice().unwrap(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let conv = Conv2d::new(&mut rng, 2, 2, 3);
        let x = Array4::from_shape_fn((1, 2, 3, 3), |(_, c, y, x)| {
            (c * 9 + y * 3 + x) as f32 * 0.1
        });
        let (y, _) = conv.forward(x.clone());
        for co in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = conv.bias[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = oy as isize + ky as isize - 1;
                                let sx = ox as isize + kx as isize - 1;
                                if (0..3).contains(&sy) && (0..3).contains(&sx) {
                                    acc += conv.weight[[co, ci * 9 + ky * 3 + kx]]
                                        * x[[0, ci, sy as usize, sx as usize]];
                                }
                            }
                        }
                    }
                    assert!((acc - y[[0, co, oy, ox]]).abs() < 1e-5);
                }
            }
        }
    }
}
