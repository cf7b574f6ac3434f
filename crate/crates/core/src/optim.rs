//! First-order optimizers over flat parameter slices.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Momentum SGD with decoupled-free L2 weight decay (`g + wd * p`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.025,
            momentum: 0.9,
            weight_decay: 3e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd<T = f64> {
    pub cfg: SgdConfig,
    pub velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(cfg: SgdConfig, sizes: &[usize]) -> Self {
        Self {
            cfg,
            velocity: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// Updates slot `slot` in place.
    pub fn step(&mut self, slot: usize, params: &mut [T], grad: &[T]) {
        let lr = T::c(self.cfg.lr);
        let mu = T::c(self.cfg.momentum);
        let wd = T::c(self.cfg.weight_decay);
        for ((p, &g), v) in params.iter_mut().zip(grad).zip(&mut self.velocity[slot]) {
            let d = g + wd * *p;
            *v = mu * *v + d;
            *p -= lr * *v;
        }
    }
}

/// Adam with bias correction; one moment pair and step counter per slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam<T = f64> {
    pub cfg: AdamConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: Vec<u64>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            cfg,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: vec![0; sizes.len()],
        }
    }

    pub fn step(&mut self, slot: usize, params: &mut [T], grad: &[T]) {
        let c = &self.cfg;
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let (lr, eps, wd) = (T::c(c.lr), T::c(c.eps), T::c(c.weight_decay));
        self.t[slot] += 1;
        let t = self.t[slot] as i32;
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for i in 0..params.len() {
            let g = grad[i] + wd * params[i];
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Adam::<f64>::new(AdamConfig::default(), &[2]);
        let mut p = vec![1.0, -1.0];
        opt.step(0, &mut p, &[5.0, -0.01]);
        assert!((p[0] - (1.0 - 3e-4)).abs() < 1e-10);
        assert!((p[1] - (-1.0 + 3e-4)).abs() < 1e-9);
    }

    #[test]
    fn adam_zero_gradient_is_stationary() {
        let mut opt = Adam::<f32>::new(AdamConfig::default(), &[3]);
        let mut p = vec![0.5f32, 1.5, -2.0];
        let before = p.clone();
        for _ in 0..10 {
            opt.step(0, &mut p, &[0.0; 3]);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let cfg = SgdConfig { lr: 0.1, momentum: 0.5, weight_decay: 0.0 };
        let mut opt = Sgd::<f64>::new(cfg, &[1]);
        let mut p = vec![0.0];
        opt.step(0, &mut p, &[1.0]);
        opt.step(0, &mut p, &[1.0]);
        assert!((p[0] + 0.1 + 0.15).abs() < 1e-15);
    }
}
