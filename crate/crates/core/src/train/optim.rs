//! First-order optimizers over [`Parameterized`] weights.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::model::Parameterized;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd {
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd { momentum: 0.9 }
    }
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        OptimizerConfig::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    lr: f64,
    steps: u64,
    first: Vec<Array2<T>>,
    second: Vec<Array2<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new<M: Parameterized<T>>(config: OptimizerConfig, lr: f64, params: &M) -> Self {
        let zeros: Vec<Array2<T>> = params.params().iter().map(|(_, p)| Array2::zeros(p.raw_dim())).collect();
        let second = match config {
            OptimizerConfig::Adam { .. } => zeros.clone(),
            OptimizerConfig::Sgd { .. } => Vec::new(),
        };
        Optimizer {
            config,
            lr,
            steps: 0,
            first: zeros,
            second,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step<M: Parameterized<T>>(&mut self, params: &mut M, grads: &M) {
        self.steps += 1;
        let lr = T::from_f64_lossy(self.lr);
        let grads = grads.params();
        match self.config {
            OptimizerConfig::Sgd { momentum } => {
                let mu = T::from_f64_lossy(momentum);
                for (((_, p), (_, g)), v) in params.params_mut().into_iter().zip(&grads).zip(&mut self.first) {
                    Zip::from(p).and(*g).and(v).for_each(|p, &g, v| {
                        *v = mu * *v + g;
                        *p -= lr * *v;
                    });
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = T::from_f64_lossy(1.0 - beta1.powi(t));
                let c2 = T::from_f64_lossy(1.0 - beta2.powi(t));
                let (b1, b2, eps) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2), T::from_f64_lossy(eps));
                let one = T::one();
                for ((((_, p), (_, g)), m), v) in params
                    .params_mut()
                    .into_iter()
                    .zip(&grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    Zip::from(p).and(*g).and(m).and(v).for_each(|p, &g, m, v| {
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    });
                }
            }
        }
    }
}

/// Euclidean norm over every gradient tensor.
pub fn grad_norm<T: Scalar, M: Parameterized<T>>(grads: &M) -> T {
    grads
        .params()
        .iter()
        .map(|(_, g)| g.iter().map(|&x| x * x).sum::<T>())
        .sum::<T>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`.
pub fn clip_grad_norm<T: Scalar, M: Parameterized<T>>(grads: &mut M, max_norm: f64) -> T {
    let norm = grad_norm(grads);
    let max = T::from_f64_lossy(max_norm);
    if norm > max && norm.is_finite() {
        let scale = max / norm;
        for (_, g) in grads.params_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}
