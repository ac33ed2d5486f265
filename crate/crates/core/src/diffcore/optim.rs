use super::matrix::Matrix;
use super::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
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

/// Adam over a fixed subset of a [`ParamStore`]. Moments are kept per
/// parameter and persist across calls.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    ids: Vec<ParamId>,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore, ids: Vec<ParamId>) -> Self {
        let first = ids
            .iter()
            .map(|&id| {
                let (r, c) = store.value(id).shape();
                Matrix::zeros(r, c)
            })
            .collect::<Vec<_>>();
        let second = first.clone();
        Adam {
            config,
            step: 0,
            ids,
            first,
            second,
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, slot: usize) -> (&Matrix, &Matrix) {
        (&self.first[slot], &self.second[slot])
    }

    /// Restores state saved by a checkpoint. Shapes must already match.
    pub fn restore(&mut self, step: u64, first: Vec<Matrix>, second: Vec<Matrix>) {
        assert_eq!(first.len(), self.ids.len());
        assert_eq!(second.len(), self.ids.len());
        self.step = step;
        self.first = first;
        self.second = second;
    }

    /// One bias-corrected update using the gradients currently in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step.min(i32::MAX as u64) as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (slot, &id) in self.ids.iter().enumerate() {
            let leaf = store.leaf_mut(id);
            let m = self.first[slot].data_mut();
            let v = self.second[slot].data_mut();
            let g = leaf.grad.data();
            for (((p, &gi), mi), vi) in leaf.value.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
