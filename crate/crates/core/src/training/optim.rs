//! Learning-rate schedule, gradient clipping and AdamW.

use serde::{Deserialize, Serialize};

use crate::nn::ParamTree;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecaySchedule {
    /// Constant after warmup.
    #[default]
    Constant,
    /// Cosine decay to zero over the remaining steps after warmup.
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
    pub decay: DecaySchedule,
}

impl LrSchedule {
    /// Learning rate for step `s` (1-based update count): `peak · s / warmup`
    /// during warmup.
    pub fn lr_at(&self, s: usize) -> f64 {
        if self.warmup > 0 && s <= self.warmup {
            return self.peak * s as f64 / self.warmup as f64;
        }
        match self.decay {
            DecaySchedule::Constant => self.peak,
            DecaySchedule::Cosine => {
                let span = self.total.saturating_sub(self.warmup).max(1) as f64;
                let t = (s.saturating_sub(self.warmup) as f64 / span).min(1.0);
                self.peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g *= s;
        }
    }
    norm
}

/// Adam with decoupled weight decay (decay scaled by the learning rate).
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(sizes: &[usize], weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One update. `decay[i]` says whether parameter `i` is weight-decayed.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], decay: &[bool], lr: f64) {
        self.t += 1;
        for (i, p) in params.iter_mut().enumerate() {
            self.update(i, p, &grads[i], decay[i], lr);
        }
    }

    /// [`AdamW::step`] over every leaf of a parameter tree, in traversal order.
    pub fn step_tree<P: ParamTree<Leaf = Tensor>>(&mut self, params: &mut P, grads: &[Vec<f64>], decay: &[bool], lr: f64) {
        self.t += 1;
        let mut i = 0;
        params.visit_mut(&mut |t| {
            self.update(i, t.data_mut(), &grads[i], decay[i], lr);
            i += 1;
        });
    }

    fn update(&mut self, i: usize, p: &mut [f64], g: &[f64], decay: bool, lr: f64) {
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (m, v) = (&mut self.m[i], &mut self.v[i]);
        let wd = if decay { lr * self.weight_decay } else { 0.0 };
        for j in 0..p.len() {
            if wd != 0.0 {
                p[j] -= wd * p[j];
            }
            m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
            v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            p[j] -= lr * update;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear() {
        let s = LrSchedule {
            peak: 2e-6,
            warmup: 1000,
            total: 5000,
            decay: DecaySchedule::Constant,
        };
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(500), 2e-6 * 500.0 / 1000.0);
        assert_eq!(s.lr_at(1000), 2e-6);
        assert_eq!(s.lr_at(4000), 2e-6);
        let c = LrSchedule {
            decay: DecaySchedule::Cosine,
            ..s
        };
        assert!((c.lr_at(3000) - 1e-6).abs() < 1e-18);
        assert!(c.lr_at(5000).abs() < 1e-18);
    }

    #[test]
    fn zero_lr_and_decay_leave_weights_bitwise() {
        let mut w = vec![0.3, -1.7, 0.0];
        let before = w.clone();
        let mut opt = AdamW::new(&[3], 0.0);
        opt.step(&mut [&mut w], &[vec![1.0, -2.0, 0.5]], &[true], 0.0);
        assert_eq!(w, before);
    }

    #[test]
    fn decay_only_with_zero_gradient() {
        let mut w = vec![1.0, -2.0];
        let mut opt = AdamW::new(&[2], 0.1);
        opt.step(&mut [&mut w], &[vec![0.0, 0.0]], &[true], 0.5);
        assert!((w[0] - 0.95).abs() < 1e-15);
        assert!((w[1] + 1.9).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut w = vec![1.0];
        let mut opt = AdamW::new(&[1], 0.0);
        opt.step(&mut [&mut w], &[vec![3.0]], &[false], 0.01);
        assert!((w[0] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
