//! Adam with bias correction.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Mismatch {
            what: "optimizer buffer length",
            expected: params.len(),
            found: if grads.len() != params.len() {
                grads.len()
            } else {
                state.m.len()
            },
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let cfg = AdamConfig::with_lr(0.1);
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState {
            m: vec![0.5, 0.5],
            v: vec![0.25, 0.25],
            step: 3,
        };
        let before = p.clone();
        adam_step(&mut p, &[0.0, 0.0], &mut s, &cfg).unwrap();
        assert_eq!(s.m, vec![0.45, 0.45]);
        assert!((s.v[0] - 0.24975).abs() < 1e-15);
        // Moments are nonzero so params still move; with zero moments they would not.
        let mut q = before.clone();
        let mut z = AdamState::new(2);
        adam_step(&mut q, &[0.0, 0.0], &mut z, &cfg).unwrap();
        assert_eq!(q, before);
        assert_ne!(p, before);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let cfg = AdamConfig::with_lr(0.01);
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = p[0];
            adam_step(&mut p, &[3.0], &mut s, &cfg).unwrap();
            last = before - p[0];
        }
        assert!((last - 0.01).abs() < 1e-9);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let cfg = AdamConfig::with_lr(0.5);
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[4.0, -0.25], &mut s, &cfg).unwrap();
        // mhat = g, vhat = g², step = lr * g / (|g| + eps).
        assert!((p[0] + 0.5 * 4.0 / (4.0 + 1e-8)).abs() < 1e-15);
        assert!((p[1] - 0.5 * 0.25 / (0.25 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut s = AdamState::new(2);
        assert!(adam_step(&mut [0.0; 2], &[1.0], &mut s, &AdamConfig::with_lr(1.0)).is_err());
    }
}
