//! Dense layers and a small ReLU perceptron with a hand-written backward pass.
//!
//! Batches are row-major `(batch, features)`; weights are `(out, in)`.

use crate::error::{shape_err, Result};
use crate::numeric::{DenseMatrix, SeededRng};
use crate::params::{join, Parameters};

/// Affine map `y = x Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weights: DenseMatrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    /// He initialization: N(0, 2 / fan_in) weights, zero bias.
    pub fn he(in_dim: usize, out_dim: usize, rng: &mut SeededRng) -> Self {
        let std = (2.0 / in_dim.max(1) as f64).sqrt();
        let mut layer = Self::zeros(in_dim, out_dim);
        for w in layer.weights.as_mut_slice() {
            *w = std * rng.normal();
        }
        layer
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut y = x.matmul_transposed(&self.weights)?;
        y.add_row_vector(&self.bias)?;
        Ok(y)
    }

    /// Returns the parameter gradient and the gradient w.r.t. `x`.
    pub fn backward(&self, x: &DenseMatrix, dy: &DenseMatrix) -> Result<(Dense, DenseMatrix)> {
        if dy.cols() != self.out_dim() || x.cols() != self.in_dim() || x.rows() != dy.rows() {
            return shape_err(format!(
                "dense backward: x {:?}, dy {:?}, weights {:?}",
                x.shape(),
                dy.shape(),
                self.weights.shape()
            ));
        }
        let grad = Dense {
            weights: dy.transposed_matmul(x)?,
            bias: dy.column_sums(),
        };
        let dx = dy.matmul(&self.weights)?;
        Ok((grad, dx))
    }
}

impl Parameters for Dense {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        let (r, c) = self.weights.shape();
        f(&join(prefix, "weight"), &[r, c], self.weights.as_slice());
        f(&join(prefix, "bias"), &[self.bias.len()], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let (r, c) = self.weights.shape();
        f(&join(prefix, "weight"), &[r, c], self.weights.as_mut_slice());
        let n = self.bias.len();
        f(&join(prefix, "bias"), &[n], &mut self.bias);
    }
}

#[inline]
pub(crate) fn relu(v: f64) -> f64 {
    // NaN must survive so that the step can report it
    if v > 0.0 || v.is_nan() {
        v
    } else {
        0.0
    }
}

/// Perceptron with ReLU hidden layers and a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Perceptron {
    pub layers: Vec<Dense>,
}

/// Values kept by [`Perceptron::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct PerceptronCache {
    /// Input of every layer.
    inputs: Vec<DenseMatrix>,
    /// Pre-activation of every hidden layer.
    pre: Vec<DenseMatrix>,
}

impl Perceptron {
    /// He-initialized network over `dims = [in, hidden.., out]`.
    ///
    /// With `zero_output` the last layer starts at zero, so the network
    /// initially emits exactly 0 (probability 0.5 after a sigmoid).
    pub fn new(dims: &[usize], zero_output: bool, rng: &mut SeededRng) -> Self {
        assert!(dims.len() >= 2, "a perceptron needs input and output dims");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                if zero_output && i == n - 1 {
                    Dense::zeros(dims[i], dims[i + 1])
                } else {
                    Dense::he(dims[i], dims[i + 1], rng)
                }
            })
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = h.map(relu);
            }
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &DenseMatrix) -> Result<(DenseMatrix, PerceptronCache)> {
        let last = self.layers.len() - 1;
        let mut cache = PerceptronCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(last),
        };
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(&h)?;
            cache.inputs.push(h);
            if i < last {
                h = pre.map(relu);
                cache.pre.push(pre);
            } else {
                h = pre;
            }
        }
        Ok((h, cache))
    }

    /// Backpropagates `d_out` (gradient w.r.t. the output) through the cached pass.
    pub fn backward(&self, cache: &PerceptronCache, d_out: &DenseMatrix) -> Result<(Perceptron, DenseMatrix)> {
        if cache.inputs.len() != self.layers.len() {
            return shape_err("perceptron cache does not match network depth");
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = d_out.clone();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                let pre = &cache.pre[i];
                if pre.shape() != delta.shape() {
                    return shape_err("perceptron cache shape drift");
                }
                for (d, p) in delta.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    if *p <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let (g, dx) = self.layers[i].backward(&cache.inputs[i], &delta)?;
            grads.push(g);
            delta = dx;
        }
        grads.reverse();
        Ok((Perceptron { layers: grads }, delta))
    }

    pub fn zeros_like(&self) -> Perceptron {
        let mut z = self.clone();
        z.zero();
        z
    }
}

impl Parameters for Perceptron {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.layers.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.layers.visit_mut(prefix, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss(net: &Perceptron, x: &DenseMatrix, target: &DenseMatrix) -> f64 {
        let y = net.forward(x).unwrap();
        0.5 * y
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = SeededRng::new(5);
        let net = Perceptron::new(&[3, 5, 4, 2], false, &mut rng);
        let x = DenseMatrix::from_vec(4, 3, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let t = DenseMatrix::from_vec(4, 2, (0..8).map(|_| rng.normal()).collect()).unwrap();
        let (y, cache) = net.forward_cached(&x).unwrap();
        let mut dy = y.clone();
        for (d, tv) in dy.as_mut_slice().iter_mut().zip(t.as_slice()) {
            *d -= tv;
        }
        let (grad, _) = net.backward(&cache, &dy).unwrap();
        let analytic = grad.flatten();
        let h = 1e-6;
        for (ti, tensor) in analytic.iter().enumerate() {
            for (k, &g) in tensor.iter().enumerate() {
                let eval = |delta: f64| {
                    let mut n = net.clone();
                    let mut idx = 0;
                    n.visit_mut("", &mut |_, _, d| {
                        if idx == ti {
                            d[k] += delta;
                        }
                        idx += 1;
                    });
                    loss(&n, &x, &t)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!((fd - g).abs() < 1e-6 * (1.0 + g.abs()), "{ti}/{k}: {g} vs {fd}");
            }
        }
    }

    #[test]
    fn zero_output_emits_zero() {
        let mut rng = SeededRng::new(1);
        let net = Perceptron::new(&[4, 8, 8, 3], true, &mut rng);
        let x = DenseMatrix::filled(2, 4, 1.5);
        assert!(net.forward(&x).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }
}
