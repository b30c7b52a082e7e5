//! Adam and plain gradient descent over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam without weight decay. Moment buffers are created on first use.
pub struct Adam {
    pub lr: f64,
    cfg: AdamConfig,
    step: u64,
    moments: Vec<Option<(Matrix, Matrix)>>,
}

impl Adam {
    pub fn new(lr: f64, cfg: AdamConfig, store: &ParamStore) -> Self {
        Adam {
            lr,
            cfg,
            step: 0,
            moments: vec![None; store.len()],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients for frozen parameters are ignored.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Matrix)]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        for (id, g) in grads {
            if !store.get(*id).trainable {
                continue;
            }
            let (m, v) = self.moments[id.index()]
                .get_or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
            let value = store.value_mut(*id);
            for (((p, gi), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// `p -= lr * g` for every trainable parameter with a gradient.
pub fn sgd_step(store: &mut ParamStore, grads: &[(ParamId, Matrix)], lr: f64) {
    for (id, g) in grads {
        if store.get(*id).trainable {
            store.value_mut(*id).axpy(-lr, g);
        }
    }
}

/// Euclidean norm over all gradient entries.
pub fn global_norm(grads: &[(ParamId, Matrix)]) -> f64 {
    grads.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt()
}
