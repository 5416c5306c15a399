//! Adam with serializable state.
//!
//! Moments are kept in `f64` regardless of the parameter storage type, so a
//! checkpoint of `(parameters, Adam)` resumes bit-exactly.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Advances the moments and returns the per-coordinate update to
    /// subtract. Coordinates with a zero gradient still decay their moments.
    fn deltas<'a>(&'a mut self, grads: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        assert_eq!(grads.len(), self.m.len(), "gradient length does not match optimizer state");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step.min(i32::MAX as u64) as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        self.m.iter_mut().zip(self.v.iter_mut()).zip(grads).map(move |((m, v), g)| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            lr * (*m / bc1) / ((*v / bc2).sqrt() + eps)
        })
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        for (p, d) in params.iter_mut().zip(self.deltas(grads)) {
            *p -= d;
        }
    }

    pub fn update_f32(&mut self, params: &mut [f32], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        for (p, d) in params.iter_mut().zip(self.deltas(grads)) {
            *p = (*p as f64 - d) as f32;
        }
    }
}

/// Scales every group so that the joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(groups: &mut [&mut Vec<f64>], max_norm: f64) -> f64 {
    let norm = groups.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in groups.iter_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
