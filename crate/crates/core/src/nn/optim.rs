//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::tensor::{Module, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// First and second moment estimates for one tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self { m: vec![T::zero(); len], v: vec![T::zero(); len] }
    }
}

/// One update at step `t >= 1`:
/// `p -= lr·wd·p`, then `p -= lr · m̂ / (sqrt(v̂) + eps)` with bias-corrected moments.
pub fn adamw_step<T: Scalar>(param: &mut [T], grad: &[T], state: &mut AdamState<T>, cfg: &AdamWConfig, t: u64) {
    assert!(t >= 1, "adam step index starts at 1");
    assert_eq!(param.len(), grad.len());
    if state.m.len() != param.len() {
        *state = AdamState::new(param.len());
    }
    let decay = T::of(cfg.lr * cfg.weight_decay);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::of(1.0 - cfg.beta2.powi(t as i32));
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *p -= decay * *p;
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Optimizer over every trainable tensor of a module, in visiting order.
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    states: Vec<AdamState<T>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, states: Vec::new(), step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, module: &mut dyn Module<T>) {
        self.step += 1;
        let t = self.step;
        let cfg = self.cfg;
        let states = &mut self.states;
        let mut i = 0;
        module.visit_mut("", &mut |_, p| {
            if !p.trainable {
                return;
            }
            if states.len() <= i {
                states.push(AdamState::new(p.len()));
            }
            adamw_step(&mut p.value, &p.grad, &mut states[i], &cfg, t);
            i += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let mut p = vec![1.5f64, -2.0, 0.25];
        let mut s = AdamState::new(3);
        let cfg = AdamWConfig::new(0.1, 0.0);
        for t in 1..=5 {
            adamw_step(&mut p, &[0.0; 3], &mut s, &cfg, t);
        }
        assert_eq!(p, vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn first_step_closed_form() {
        // At t=1: m̂ = g, v̂ = g², so the step is lr · g / (|g| + eps).
        let mut p = vec![1.0f64];
        let mut s = AdamState::new(1);
        adamw_step(&mut p, &[1.0], &mut s, &AdamWConfig::new(0.1, 0.0), 1);
        assert!((p[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_closed_form() {
        let mut p = vec![2.0f64, -3.0];
        let mut s = AdamState::new(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut s, &AdamWConfig::new(1e-4, 0.005), 1);
        assert!((p[0] - 2.0 * (1.0 - 5e-7)).abs() < 1e-15);
        assert!((p[1] + 3.0 * (1.0 - 5e-7)).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_params_bitwise() {
        let mut p = vec![0.3f32, -7.0];
        let mut s = AdamState::new(2);
        adamw_step(&mut p, &[5.0, -1.0], &mut s, &AdamWConfig::new(0.0, 0.005), 1);
        assert_eq!(p, vec![0.3f32, -7.0]);
    }
}
