//! Adam with decoupled weight decay.
//!
//! Decay shrinks the weights directly (`w *= 1 - lr * wd`) before the adaptive
//! step and never enters the moment estimates.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: f64,
    pub v: f64,
}

/// One AdamW update of a single weight at step `t` (1-based).
pub fn optimizer_step(w: &mut f64, state: &mut Moments, grad: f64, cfg: &AdamWConfig, t: u64) {
    debug_assert!(t >= 1);
    *w *= 1.0 - cfg.lr * cfg.weight_decay;
    state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad;
    state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad;
    let t = t as i32;
    let m_hat = state.m / (1.0 - cfg.beta1.powi(t));
    let v_hat = state.v / (1.0 - cfg.beta2.powi(t));
    *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
}

/// Optimizer state over a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    moments: Vec<Vec<Moments>>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, shapes: &[usize]) -> Self {
        Self { config, moments: shapes.iter().map(|&n| vec![Moments::default(); n]).collect(), t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> &[Vec<Moments>] {
        &self.moments
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.moments.len(), "tensor count changed");
        self.t += 1;
        for ((p, g), state) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            assert_eq!(p.len(), g.len());
            for ((w, &gi), s) in p.iter_mut().zip(g.iter()).zip(state.iter_mut()) {
                optimizer_step(w, s, gi, &self.config, self.t);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_only_decays() {
        let cfg = AdamWConfig::new(0.1, 0.01);
        let mut w = 2.0;
        let mut s = Moments::default();
        optimizer_step(&mut w, &mut s, 0.0, &cfg, 1);
        assert_eq!(w, 2.0 * (1.0 - 0.001));
        assert_eq!(s, Moments::default());
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let cfg = AdamWConfig::new(0.01, 0.0);
        for g in [3.0, -0.2, 1e-3] {
            let mut w = 0.5;
            optimizer_step(&mut w, &mut Moments::default(), g, &cfg, 1);
            assert!((w - (0.5 - 0.01 * g.signum())).abs() < 1e-6 * 0.01 / g.abs().min(1.0));
        }
    }

    #[test]
    fn two_steps_match_scalar_recurrence() {
        let (lr, wd, b1, b2, eps) = (0.05, 0.02, 0.9, 0.999, 1e-8);
        let g = 0.7;
        // hand-rolled recurrence
        let mut w_ref: f64 = 1.3;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            w_ref -= lr * wd * w_ref;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - f64::powi(b1, t));
            let vh = v / (1.0 - f64::powi(b2, t));
            w_ref -= lr * mh / (vh.sqrt() + eps);
        }
        let mut opt = AdamW::new(AdamWConfig::new(lr, wd), &[1]);
        let mut w = [1.3];
        for _ in 0..2 {
            opt.step(&mut [&mut w[..]], &[&[g]]);
        }
        assert!((w[0] - w_ref).abs() < 1e-14);
        assert_eq!(opt.steps_taken(), 2);
    }

    #[test]
    fn repeated_zero_gradients_shrink_geometrically() {
        let cfg = AdamWConfig::new(3e-4, 1e-2);
        let mut opt = AdamW::new(cfg, &[3]);
        let start = [0.25, -1.5, 4.0];
        let mut w = start;
        let n = 500;
        for _ in 0..n {
            opt.step(&mut [&mut w[..]], &[&[0.0, 0.0, 0.0]]);
        }
        let factor = 1.0 - cfg.lr * cfg.weight_decay;
        for (wi, si) in w.iter().zip(start) {
            let mut expected = si;
            for _ in 0..n {
                expected *= factor;
            }
            assert_eq!(*wi, expected);
            assert!((wi - si * factor.powi(n)).abs() <= 1e-13 * si.abs());
        }
    }
}
