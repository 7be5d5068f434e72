//! Adaptive-moment optimizer over any [`Parameters`] value.

use crate::error::{shape_err, Result};
use crate::params::Parameters;

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

/// Moment estimates for one parameter group. Moments are allocated on the
/// first step and mirror the group's tensors in traversal order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One descent step `params -= lr · m̂ / (√v̂ + eps)`.
    pub fn descend<P: Parameters>(&mut self, params: &mut P, grad: &P) -> Result<()> {
        self.apply(params, grad, 1.0)
    }

    /// One ascent step, for objectives that are maximized.
    pub fn ascend<P: Parameters>(&mut self, params: &mut P, grad: &P) -> Result<()> {
        self.apply(params, grad, -1.0)
    }

    fn apply<P: Parameters>(&mut self, params: &mut P, grad: &P, sign: f64) -> Result<()> {
        let g = grad.flatten();
        if self.m.is_empty() {
            self.m = g.iter().map(|t| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        if g.len() != self.m.len() || g.iter().zip(&self.m).any(|(a, b)| a.len() != b.len()) {
            return shape_err("gradient layout differs from the optimizer state");
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let mut t = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut("", &mut |_, _, p| {
            for (j, pj) in p.iter_mut().enumerate() {
                let gj = sign * g[t][j];
                let m = &mut ms[t][j];
                let v = &mut vs[t][j];
                *m = beta1 * *m + (1.0 - beta1) * gj;
                *v = beta2 * *v + (1.0 - beta2) * gj * gj;
                *pj -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
            t += 1;
        });
        Ok(())
    }

    /// Flattened moments, for checkpoints.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn set_moments(&mut self, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        self.m = m;
        self.v = v;
    }
}
