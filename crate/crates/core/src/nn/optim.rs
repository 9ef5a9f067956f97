use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::Network;

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f32,
    weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(net: &Network, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum: momentum as f32,
            weight_decay: weight_decay as f32,
            velocity: net.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step(&mut self, net: &mut Network, lr: f64) {
        let lr = lr as f32;
        for ((param, grad), vel) in net
            .params_and_grads_mut()
            .into_iter()
            .zip(&mut self.velocity)
        {
            for ((p, g), v) in param.iter_mut().zip(grad.iter()).zip(vel.iter_mut()) {
                let d = *g + self.weight_decay * *p;
                *v = self.momentum * *v + d;
                *p -= lr * *v;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay to zero.
    Cosine,
    /// `(1 - t/T)^power`.
    Poly { power: f64 },
}

impl LrSchedule {
    pub fn value(&self, base: f64, step: u64, total: u64) -> f64 {
        let frac = if total == 0 {
            0.0
        } else {
            (step as f64 / total as f64).min(1.0)
        };
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => base * 0.5 * (1.0 + (PI * frac).cos()),
            LrSchedule::Poly { power } => base * (1.0 - frac).powf(*power),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        assert_eq!(LrSchedule::Constant.value(0.1, 5, 10), 0.1);
        assert!((LrSchedule::Cosine.value(0.1, 0, 10) - 0.1).abs() < 1e-12);
        assert!(LrSchedule::Cosine.value(0.1, 10, 10).abs() < 1e-12);
        assert!(
            (LrSchedule::Poly { power: 0.9 }.value(1.0, 5, 10) - 0.5f64.powf(0.9)).abs() < 1e-12
        );
    }
}
