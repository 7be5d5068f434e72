//! Named-tensor traversal shared by optimizers, checkpoints and gradient checks.
//!
//! Gradients reuse the parameter types: a gradient of a `Perceptron` is a
//! `Perceptron` whose entries hold partial derivatives. Traversal order is
//! fixed, so two values of the same type line up tensor by tensor.

/// A type that owns a fixed, ordered list of named `f64` tensors.
#[allow(clippy::type_complexity)]
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));

    /// Total number of scalars.
    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, d| n += d.len());
        n
    }

    /// Copies every tensor into a flat list, in traversal order.
    fn flatten(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        self.visit("", &mut |_, _, d| out.push(d.to_vec()));
        out
    }

    /// Sets every scalar to zero.
    fn zero(&mut self) {
        self.visit_mut("", &mut |_, _, d| d.iter_mut().for_each(|v| *v = 0.0));
    }

    /// Bitwise equality of all tensors.
    fn bit_equal(&self, other: &Self) -> bool
    where
        Self: Sized,
    {
        let a = self.flatten();
        let b = other.flatten();
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|(x, y)| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()))
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<A: Parameters, B: Parameters> Parameters for (A, B) {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.0.visit(prefix, f);
        self.1.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.0.visit_mut(prefix, f);
        self.1.visit_mut(prefix, f);
    }
}

impl<P: Parameters> Parameters for Vec<P> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// A single free scalar, e.g. a learned log-partition constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scalar(pub f64);

impl Parameters for Scalar {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(prefix, &[1], std::slice::from_ref(&self.0));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        f(prefix, &[1], std::slice::from_mut(&mut self.0));
    }
}

/// A free vector, e.g. per-unit logits of a sample-independent mask policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector(pub Vec<f64>);

impl Parameters for Vector {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(prefix, &[self.0.len()], &self.0);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let n = self.0.len();
        f(prefix, &[n], &mut self.0);
    }
}
