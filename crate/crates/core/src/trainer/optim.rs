//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::collections::HashMap;

use crate::autograd::Mat;
use crate::params::{ParamId, ParamStore};

/// Cosine annealing from `lr` at step 0 to `lr_min` at step `steps − 1`.
pub fn cosine_lr(step: usize, steps: usize, lr: f64, lr_min: f64) -> f64 {
    if steps <= 1 {
        return lr_min;
    }
    let progress = step.min(steps - 1) as f64 / (steps - 1) as f64;
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: HashMap<ParamId, (Mat, Mat, u64)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: HashMap::new(),
        }
    }

    /// One update of every parameter in `grads`; frozen tensors are skipped.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Mat)], lr: f64) {
        for (id, grad) in grads {
            let p = store.get_mut(*id);
            if p.frozen {
                continue;
            }
            let (m, v, t) = self
                .state
                .entry(*id)
                .or_insert_with(|| (Mat::zeros(grad.dim()), Mat::zeros(grad.dim()), 0));
            *t += 1;
            let bc1 = 1.0 - self.beta1.powi(*t as i32);
            let bc2 = 1.0 - self.beta2.powi(*t as i32);
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let decay = 1.0 - lr * self.weight_decay;
            ndarray::Zip::from(&mut p.value)
                .and(&mut *m)
                .and(&mut *v)
                .and(grad)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w *= decay;
                    *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use ndarray::array;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 60, 1e-3, 1e-5), 1e-3);
        assert!((cosine_lr(59, 60, 1e-3, 1e-5) - 1e-5).abs() < 1e-9);
        assert!((cosine_lr(1, 3, 1.0, 0.0) - 0.5).abs() < 1e-12);
        assert_eq!(cosine_lr(0, 1, 1e-3, 1e-5), 1e-5);
        for s in 1..60 {
            assert!(cosine_lr(s, 60, 1e-3, 1e-5) <= cosine_lr(s - 1, 60, 1e-3, 1e-5));
        }
    }

    #[test]
    fn first_step_matches_closed_form() {
        // At step 1 the bias-corrected ratio is g/|g| (up to eps).
        let mut store = ParamStore::new();
        let id = store.add("w", array![[1.0, -2.0]], ParamGroup::Fusion, None, false);
        let frozen = store.add("f", array![[3.0]], ParamGroup::Fusion, None, true);
        let mut opt = AdamW::new(0.1);
        opt.step(&mut store, &[(id, array![[0.5, -4.0]]), (frozen, array![[1.0]])], 0.01);
        let w = store.value(id);
        let expect0 = 1.0 * (1.0 - 0.01 * 0.1) - 0.01 * 0.5 / (0.5 + 1e-8);
        let expect1 = -2.0 * (1.0 - 0.01 * 0.1) + 0.01 * 4.0 / (4.0 + 1e-8);
        assert!((w[[0, 0]] - expect0).abs() < 1e-15);
        assert!((w[[0, 1]] - expect1).abs() < 1e-15);
        assert_eq!(store.value(frozen)[[0, 0]], 3.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", array![[5.0, -3.0]], ParamGroup::Fusion, None, false);
        let mut opt = AdamW::new(0.0);
        for s in 0..500 {
            let g = store.value(id).mapv(|x| 2.0 * (x - 1.0));
            opt.step(&mut store, &[(id, g)], cosine_lr(s, 500, 0.1, 1e-4));
        }
        assert!(store.value(id).iter().all(|x| (x - 1.0).abs() < 1e-2));
    }
}
