//! Small CPU backbones with manual backpropagation.
//!
//! These stand in for the large networks of a full-scale setup: an MLP for
//! low-dimensional toy data, a small conv net for 32x32 images, and a fully
//! convolutional net for dense prediction.

mod checkpoint;
mod layers;
mod optim;

use ndarray::{Array2, Array4, ArrayD, ArrayView2, ArrayView4, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DmtError, Result};
use crate::prob::softmax_in_place;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use layers::{Conv2d, Layer, Linear};
pub use optim::{LrSchedule, Sgd};

use layers::Cache;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    /// Fully connected ReLU network over flat feature vectors.
    Mlp {
        inputs: usize,
        hidden: Vec<usize>,
        classes: usize,
    },
    /// conv3x3-ReLU-maxpool blocks, global average pooling, linear head.
    SmallCnn {
        channels: usize,
        height: usize,
        width: usize,
        widths: Vec<usize>,
        classes: usize,
    },
    /// conv3x3-ReLU stack with a 1x1 classifier, producing per-pixel logits.
    Fcn {
        channels: usize,
        widths: Vec<usize>,
        classes: usize,
    },
}

impl Architecture {
    pub fn classes(&self) -> usize {
        match self {
            Architecture::Mlp { classes, .. }
            | Architecture::SmallCnn { classes, .. }
            | Architecture::Fcn { classes, .. } => *classes,
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, Architecture::Fcn { .. })
    }

    /// Length of one flattened input row for per-sample architectures.
    pub fn row_len(&self) -> Option<usize> {
        match self {
            Architecture::Mlp { inputs, .. } => Some(*inputs),
            Architecture::SmallCnn {
                channels,
                height,
                width,
                ..
            } => Some(channels * height * width),
            Architecture::Fcn { .. } => None,
        }
    }

    fn build(&self, rng: &mut ChaCha8Rng) -> Vec<Layer> {
        let mut layers = Vec::new();
        match self {
            Architecture::Mlp {
                inputs,
                hidden,
                classes,
            } => {
                let mut prev = *inputs;
                for &h in hidden {
                    layers.push(Layer::Linear(Linear::new(rng, prev, h)));
                    layers.push(Layer::Relu);
                    prev = h;
                }
                layers.push(Layer::Linear(Linear::new(rng, prev, *classes)));
            }
            Architecture::SmallCnn {
                channels,
                widths,
                classes,
                ..
            } => {
                let mut prev = *channels;
                for &w in widths {
                    layers.push(Layer::Conv2d(Conv2d::new(rng, prev, w, 3)));
                    layers.push(Layer::Relu);
                    layers.push(Layer::MaxPool2);
                    prev = w;
                }
                layers.push(Layer::GlobalAvgPool);
                layers.push(Layer::Linear(Linear::new(rng, prev, *classes)));
            }
            Architecture::Fcn {
                channels,
                widths,
                classes,
            } => {
                let mut prev = *channels;
                for &w in widths {
                    layers.push(Layer::Conv2d(Conv2d::new(rng, prev, w, 3)));
                    layers.push(Layer::Relu);
                    prev = w;
                }
                layers.push(Layer::Conv2d(Conv2d::new(rng, prev, *classes, 1)));
            }
        }
        layers
    }
}

/// A sequential network with cached activations for one backward pass.
#[derive(Debug, Clone)]
pub struct Network {
    arch: Architecture,
    seed: u64,
    layers: Vec<Layer>,
    caches: Vec<Cache>,
}

impl Network {
    /// Fresh He-initialized network; the same seed gives identical weights.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch.build(&mut rng);
        Network {
            arch,
            seed,
            layers,
            caches: Vec::new(),
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn init_seed(&self) -> u64 {
        self.seed
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    /// Reshapes flat rows `[B, D]` to this network's input layout.
    pub fn rows_to_input(&self, rows: ArrayView2<f32>) -> Result<ArrayD<f32>> {
        let b = rows.nrows();
        let owned = rows.as_standard_layout().into_owned();
        match &self.arch {
            Architecture::Mlp { inputs, .. } if rows.ncols() == *inputs => Ok(owned.into_dyn()),
            Architecture::SmallCnn {
                channels,
                height,
                width,
                ..
            } if rows.ncols() == channels * height * width => Ok(owned
                .into_shape_with_order(IxDyn(&[b, *channels, *height, *width]))
                .expect("checked size")),
            _ => Err(DmtError::validation(format!(
                "input rows of width {} do not fit {:?}",
                rows.ncols(),
                self.arch
            ))),
        }
    }

    /// Forward pass that records activations for [`Network::backward`].
    pub fn forward_train(&mut self, x: ArrayD<f32>) -> ArrayD<f32> {
        self.caches.clear();
        let mut h = x;
        for layer in &self.layers {
            let (out, cache) = layer.forward(h);
            self.caches.push(cache);
            h = out;
        }
        h
    }

    /// Accumulates parameter gradients for the last [`Network::forward_train`].
    pub fn backward(&mut self, grad_logits: ArrayD<f32>) {
        let caches = std::mem::take(&mut self.caches);
        let mut g = grad_logits;
        for (layer, cache) in self.layers.iter_mut().zip(&caches).rev() {
            g = layer.backward(cache, g);
        }
    }

    /// Forward pass without caching.
    pub fn logits(&self, x: ArrayD<f32>) -> ArrayD<f32> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(h).0;
        }
        h
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            for (_, g) in layer.params_and_grads_mut() {
                g.fill(0.0);
            }
        }
    }

    pub fn params(&self) -> Vec<&[f32]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_and_grads_mut(&mut self) -> Vec<(&mut [f32], &mut [f32])> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_and_grads_mut())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn param_snapshot(&self) -> Vec<Vec<f32>> {
        self.params().iter().map(|p| p.to_vec()).collect()
    }

    pub fn set_params(&mut self, values: &[Vec<f32>]) -> Result<()> {
        let mut targets = self.params_and_grads_mut();
        if targets.len() != values.len()
            || targets
                .iter()
                .zip(values)
                .any(|((p, _), v)| p.len() != v.len())
        {
            return Err(DmtError::validation(
                "parameter snapshot does not match the network shape",
            ));
        }
        for ((p, _), v) in targets.iter_mut().zip(values) {
            p.copy_from_slice(v);
        }
        Ok(())
    }

    /// Copy of this network carrying `values` as parameters.
    pub fn with_params(&self, values: &[Vec<f32>]) -> Result<Network> {
        let mut n = Network {
            arch: self.arch.clone(),
            seed: self.seed,
            layers: self.layers.clone(),
            caches: Vec::new(),
        };
        n.set_params(values)?;
        Ok(n)
    }

    /// Class probabilities for flat rows, computed in chunks.
    pub fn predict_proba_rows(&self, rows: ArrayView2<f32>) -> Result<Array2<f32>> {
        const CHUNK: usize = 256;
        let classes = self.classes();
        let mut out = Array2::zeros((rows.nrows(), classes));
        for start in (0..rows.nrows()).step_by(CHUNK) {
            let end = (start + CHUNK).min(rows.nrows());
            let x = self.rows_to_input(rows.slice(ndarray::s![start..end, ..]))?;
            let logits = self.logits(x);
            let mut probs = logits
                .into_dimensionality::<ndarray::Ix2>()
                .expect("per-sample logits");
            softmax_rows(&mut probs);
            out.slice_mut(ndarray::s![start..end, ..]).assign(&probs);
        }
        Ok(out)
    }

    /// Per-pixel class probabilities `[B, C, H, W]` for images `[B, C_in, H, W]`.
    pub fn predict_proba_images(&self, images: ArrayView4<f32>) -> Result<Array4<f32>> {
        if !self.arch.is_dense() {
            return Err(DmtError::validation(
                "dense prediction needs a dense architecture",
            ));
        }
        const CHUNK: usize = 16;
        let (b, _, h, w) = images.dim();
        let mut out = Array4::zeros((b, self.classes(), h, w));
        for start in (0..b).step_by(CHUNK) {
            let end = (start + CHUNK).min(b);
            let x = images
                .slice(ndarray::s![start..end, .., .., ..])
                .as_standard_layout()
                .into_owned()
                .into_dyn();
            let mut probs = self
                .logits(x)
                .into_dimensionality::<ndarray::Ix4>()
                .expect("dense logits");
            softmax_channels(&mut probs);
            out.slice_mut(ndarray::s![start..end, .., .., ..])
                .assign(&probs);
        }
        Ok(out)
    }
}

/// Row-wise softmax in place.
pub fn softmax_rows(x: &mut Array2<f32>) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        if let Some(s) = row.as_slice_mut() {
            softmax_in_place(s);
        } else {
            let mut v = row.to_vec();
            softmax_in_place(&mut v);
            row.assign(&ndarray::ArrayView1::from(&v));
        }
    }
}

/// Softmax over the channel axis of `[B, C, H, W]`, in place.
pub fn softmax_channels(x: &mut Array4<f32>) {
    let (b, c, h, w) = x.dim();
    let plane = h * w;
    let data = x.as_slice_mut().expect("standard layout");
    let mut buf = vec![0f32; c];
    for bi in 0..b {
        let base = bi * c * plane;
        for px in 0..plane {
            for (ci, v) in buf.iter_mut().enumerate() {
                *v = data[base + ci * plane + px];
            }
            softmax_in_place(&mut buf);
            for (ci, v) in buf.iter().enumerate() {
                data[base + ci * plane + px] = *v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn mlp() -> Architecture {
        Architecture::Mlp {
            inputs: 2,
            hidden: vec![8],
            classes: 2,
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Network::new(mlp(), 1);
        let b = Network::new(mlp(), 1);
        let c = Network::new(mlp(), 2);
        assert_eq!(a.param_snapshot(), b.param_snapshot());
        assert_ne!(a.param_snapshot(), c.param_snapshot());
    }

    #[test]
    fn rows_are_distributions() {
        let net = Network::new(mlp(), 5);
        let x = Array::from_shape_fn((7, 2), |(i, j)| (i as f32 - 3.0) * (j as f32 + 1.0));
        let p = net.predict_proba_rows(x.view()).unwrap();
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn cnn_and_fcn_shapes() {
        let cnn = Network::new(
            Architecture::SmallCnn {
                channels: 3,
                height: 8,
                width: 8,
                widths: vec![4, 4],
                classes: 10,
            },
            0,
        );
        let x = Array2::from_elem((3, 3 * 64), 0.5f32);
        assert_eq!(cnn.predict_proba_rows(x.view()).unwrap().dim(), (3, 10));

        let fcn = Network::new(
            Architecture::Fcn {
                channels: 3,
                widths: vec![4],
                classes: 3,
            },
            0,
        );
        let img = Array4::from_elem((2, 3, 5, 6), 0.1f32);
        assert_eq!(
            fcn.predict_proba_images(img.view()).unwrap().dim(),
            (2, 3, 5, 6)
        );
    }

    #[test]
    fn gradient_descent_reduces_loss() {
        // one labeled batch, plain cross-entropy
        let mut net = Network::new(mlp(), 11);
        let x = ndarray::array![[1.0f32, 1.0], [-1.0, -1.0], [1.0, -0.5], [-1.0, 0.5]];
        let y = [0usize, 1, 0, 1];
        let loss = |net: &Network| -> f32 {
            let p = net.predict_proba_rows(x.view()).unwrap();
            y.iter()
                .enumerate()
                .map(|(i, &c)| -p[[i, c]].ln())
                .sum::<f32>()
                / 4.0
        };
        let before = loss(&net);
        let mut opt = Sgd::new(&net, 0.9, 0.0);
        for _ in 0..50 {
            net.zero_grad();
            let logits = net.forward_train(x.clone().into_dyn());
            let mut p = logits.into_dimensionality::<ndarray::Ix2>().unwrap();
            softmax_rows(&mut p);
            for (i, &c) in y.iter().enumerate() {
                p[[i, c]] -= 1.0;
            }
            p /= 4.0;
            net.backward(p.into_dyn());
            opt.step(&mut net, 0.1);
        }
        assert!(loss(&net) < before * 0.5);
    }
}
