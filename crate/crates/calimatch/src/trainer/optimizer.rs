//! First-order optimizers behind a common trait, selected by name.
//!
//! The update operates on the flat parameter vector; temperature clamping is
//! applied by the caller after each step.

use crate::error::{Error, Result};

pub trait Optimizer: Send {
    fn name(&self) -> &'static str;
    /// One in-place update of `params` given `grads` at learning rate `lr`.
    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64);
}

/// Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8).
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }
}

impl Optimizer for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Plain stochastic gradient descent with optional momentum.
pub struct Sgd {
    momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(n_params: usize, momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: vec![0.0; n_params],
        }
    }
}

impl Optimizer for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        for i in 0..params.len() {
            self.velocity[i] = self.momentum * self.velocity[i] + grads[i];
            params[i] -= lr * self.velocity[i];
        }
    }
}

pub const OPTIMIZER_NAMES: [&str; 2] = ["adam", "sgd"];

/// Look an optimizer up by name.
pub fn make_optimizer(name: &str, n_params: usize) -> Result<Box<dyn Optimizer>> {
    match name {
        "adam" => Ok(Box::new(Adam::new(n_params))),
        "sgd" => Ok(Box::new(Sgd::new(n_params, 0.9))),
        other => Err(Error::config(format!(
            "unknown optimizer '{other}'; valid: {}",
            OPTIMIZER_NAMES.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_moves_against_the_gradient() {
        let mut opt = Adam::new(2);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[0.5, -0.5], 0.1);
        assert!(p[0] < 1.0);
        assert!(p[1] > -1.0);
    }

    #[test]
    fn zero_gradient_leaves_parameters_alone() {
        // Relevant for the ablations: parameters without gradient flow (the
        // temperatures) must stay exactly at initialization.
        let mut opt = Adam::new(1);
        let mut p = vec![1.5];
        for _ in 0..100 {
            opt.step(&mut p, &[0.0], 0.1);
        }
        assert_eq!(p[0], 1.5);
        let mut sgd = Sgd::new(1, 0.9);
        let mut p = vec![1.5];
        sgd.step(&mut p, &[0.0], 0.1);
        assert_eq!(p[0], 1.5);
    }

    #[test]
    fn sgd_minimizes_a_quadratic() {
        let mut opt = Sgd::new(1, 0.0);
        let mut p = vec![3.0];
        for _ in 0..200 {
            let g = 2.0 * p[0];
            opt.step(&mut p, &[g], 0.05);
        }
        assert!(p[0].abs() < 1e-3);
    }

    #[test]
    fn registry_rejects_unknown_names() {
        assert!(make_optimizer("adam", 4).is_ok());
        assert!(make_optimizer("sgd", 4).is_ok());
        match make_optimizer("lbfgs", 4) {
            Err(err) => assert!(err.to_string().contains("adam")),
            Ok(_) => panic!("unknown optimizer accepted"),
        }
    }
}
