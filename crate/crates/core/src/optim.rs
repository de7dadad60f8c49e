use serde::{Deserialize, Serialize};

use crate::contrastive::Gradients;
use crate::hemix::ProjectionBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    /// Adam with bias correction and optional decoupled weight decay.
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for the four projection matrices.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    adam: AdamParams,
    step: u32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, dim: usize) -> Self {
        let zeros = vec![vec![0.0; dim * dim]; 4];
        Self {
            kind,
            lr,
            weight_decay,
            adam: AdamParams::default(),
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&mut self, bundle: &mut ProjectionBundle, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.adam.beta1, self.adam.beta2);
        let corr1 = 1.0 - b1.powi(t);
        let corr2 = 1.0 - b2.powi(t);
        let grads = grads.matrices();
        for (m, w) in bundle.matrices_mut().into_iter().enumerate() {
            let g = grads[m].as_slice();
            let w = w.as_mut_slice();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (wi, gi) in w.iter_mut().zip(g) {
                        *wi -= self.lr * (gi + self.weight_decay * *wi);
                    }
                }
                OptimizerKind::Adam => {
                    let first = &mut self.first[m];
                    let second = &mut self.second[m];
                    for i in 0..w.len() {
                        first[i] = b1 * first[i] + (1.0 - b1) * g[i];
                        second[i] = b2 * second[i] + (1.0 - b2) * g[i] * g[i];
                        let m_hat = first[i] / corr1;
                        let v_hat = second[i] / corr2;
                        // decoupled decay, applied to the pre-update weight
                        w[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.adam.eps) + self.weight_decay * w[i]);
                    }
                }
            }
        }
    }
}
