//! The masked classifier `p(y | x, z; θ)`.
//!
//! Hidden layers compute `h′ = ReLU(b + W h_prev)` and then `h = z ∘ h′`,
//! where `z` is a binary mask. Masks are applied without inverse-rate
//! rescaling; the output layer is never masked.

use crate::error::{arg_err, shape_err, Error, Result};
use crate::numeric::{log_sum_exp, softmax_rows, DenseMatrix, SeededRng};
use crate::params::{join, Parameters};
use crate::perceptron::{relu, Dense};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneNet {
    pub layers: Vec<Dense>,
}

/// Everything a forward pass produces, kept for the backward pass and for
/// conditioning the mask generators.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: DenseMatrix,
    /// `h′_l`, the ReLU output of each hidden layer before masking.
    pub unmasked: Vec<DenseMatrix>,
    /// `h_l = z_l ∘ h′_l`.
    pub hidden: Vec<DenseMatrix>,
    pub masks: Vec<DenseMatrix>,
    pub logits: DenseMatrix,
    pub probs: DenseMatrix,
}

impl BackboneNet {
    /// He-initialized network over `layer_dims = [d0, d1, .., K]`.
    pub fn new(layer_dims: &[usize], rng: &mut SeededRng) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return arg_err(format!("invalid backbone dims {layer_dims:?}"));
        }
        if *layer_dims.last().unwrap() < 2 {
            return arg_err("a classifier needs at least two classes");
        }
        let layers = layer_dims.windows(2).map(|w| Dense::he(w[0], w[1], rng)).collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return arg_err("backbone without layers");
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return shape_err(format!(
                    "layer output {} feeds layer input {}",
                    w[0].out_dim(),
                    w[1].in_dim()
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].in_dim()];
        dims.extend(self.layers.iter().map(Dense::out_dim));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Widths `d_1 .. d_{L-1}` of the maskable hidden layers.
    pub fn maskable_dims(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(Dense::out_dim)
            .collect()
    }

    pub fn num_maskable_units(&self) -> usize {
        self.maskable_dims().iter().sum()
    }

    /// Forward pass where `mask_for(l, h′_l)` supplies the mask of hidden
    /// layer `l` after its unmasked activation is known.
    pub fn forward_with<F>(&self, x: &DenseMatrix, mut mask_for: F) -> Result<ForwardTrace>
    where
        F: FnMut(usize, &DenseMatrix) -> Result<DenseMatrix>,
    {
        if x.cols() != self.input_dim() {
            return shape_err(format!(
                "input has {} features, backbone expects {}",
                x.cols(),
                self.input_dim()
            ));
        }
        let hidden_layers = self.layers.len() - 1;
        let mut trace = ForwardTrace {
            input: x.clone(),
            unmasked: Vec::with_capacity(hidden_layers),
            hidden: Vec::with_capacity(hidden_layers),
            masks: Vec::with_capacity(hidden_layers),
            logits: DenseMatrix::zeros(0, 0),
            probs: DenseMatrix::zeros(0, 0),
        };
        for l in 0..hidden_layers {
            let prev = if l == 0 { x } else { &trace.hidden[l - 1] };
            let unmasked = self.layers[l].forward(prev)?.map(relu);
            let mask = mask_for(l, &unmasked)?;
            if mask.shape() != unmasked.shape() {
                return shape_err(format!(
                    "mask for hidden layer {l} is {:?}, activations are {:?}",
                    mask.shape(),
                    unmasked.shape()
                ));
            }
            let h = mask.hadamard(&unmasked)?;
            trace.unmasked.push(unmasked);
            trace.hidden.push(h);
            trace.masks.push(mask);
        }
        let last_in = trace.hidden.last().unwrap_or(x);
        trace.logits = self.layers[hidden_layers].forward(last_in)?;
        trace.probs = softmax_rows(&trace.logits);
        Ok(trace)
    }

    pub fn forward(&self, x: &DenseMatrix, masks: &[DenseMatrix]) -> Result<ForwardTrace> {
        if masks.len() != self.layers.len() - 1 {
            return shape_err(format!(
                "{} masks for {} hidden layers",
                masks.len(),
                self.layers.len() - 1
            ));
        }
        self.forward_with(x, |l, _| Ok(masks[l].clone()))
    }

    /// Forward pass with every unit kept.
    pub fn forward_unmasked(&self, x: &DenseMatrix) -> Result<ForwardTrace> {
        self.forward_with(x, |_, h| Ok(DenseMatrix::filled(h.rows(), h.cols(), 1.0)))
    }

    /// Pre-softmax outputs under the given masks.
    pub fn predict_logits(&self, x: &DenseMatrix, masks: &[DenseMatrix]) -> Result<DenseMatrix> {
        Ok(self.forward(x, masks)?.logits)
    }

    /// Exact gradient of the mean cross-entropy w.r.t. every weight and bias,
    /// masks held fixed.
    pub fn backward(&self, trace: &ForwardTrace, labels: &[usize]) -> Result<BackboneNet> {
        let hidden_layers = self.layers.len() - 1;
        let batch = trace.input.rows();
        let k = self.num_classes();
        if trace.hidden.len() != hidden_layers
            || trace.probs.shape() != (batch, k)
            || trace.input.cols() != self.input_dim()
            || trace
                .hidden
                .iter()
                .zip(&self.layers)
                .any(|(h, layer)| h.cols() != layer.out_dim() || h.rows() != batch)
        {
            return Err(Error::State(
                "forward trace does not match the backbone it is applied to".into(),
            ));
        }
        check_labels(labels, batch, k)?;

        let mut delta = trace.probs.clone();
        for (i, &y) in labels.iter().enumerate() {
            delta.row_mut(i)[y] -= 1.0;
        }
        let scale = 1.0 / batch as f64;
        delta.as_mut_slice().iter_mut().for_each(|d| *d *= scale);

        let mut grads = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let input = if l == 0 { &trace.input } else { &trace.hidden[l - 1] };
            let (g, d_input) = self.layers[l].backward(input, &delta)?;
            grads.push(g);
            if l == 0 {
                break;
            }
            // d_input is w.r.t. h_{l-1} = z ∘ ReLU(pre); push through mask and ReLU
            let mask = &trace.masks[l - 1];
            let unmasked = &trace.unmasked[l - 1];
            let mut d = d_input;
            for ((dv, z), h) in d
                .as_mut_slice()
                .iter_mut()
                .zip(mask.as_slice())
                .zip(unmasked.as_slice())
            {
                *dv *= z;
                if *h <= 0.0 {
                    *dv = 0.0;
                }
            }
            delta = d;
        }
        grads.reverse();
        Ok(BackboneNet { layers: grads })
    }

    pub fn zeros_like(&self) -> BackboneNet {
        let mut z = self.clone();
        z.zero();
        z
    }
}

impl Parameters for BackboneNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

fn check_labels(labels: &[usize], batch: usize, k: usize) -> Result<()> {
    if labels.len() != batch {
        return arg_err(format!("{} labels for a batch of {batch}", labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return arg_err(format!("label {bad} outside [0, {k})"));
    }
    Ok(())
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    /// `log p(y_i | x_i, z_i; θ)` per sample, via log-softmax of the logits.
    pub fn log_likelihoods(&self, labels: &[usize]) -> Result<Vec<f64>> {
        check_labels(labels, self.batch_size(), self.logits.cols())?;
        labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let row = self.logits.row(i);
                Ok(row[y] - log_sum_exp(row)?)
            })
            .collect()
    }
}

/// Mean of `-log p(y_i | x_i, z_i; θ)` over the batch.
pub fn cross_entropy(trace: &ForwardTrace, labels: &[usize]) -> Result<f64> {
    let ll = trace.log_likelihoods(labels)?;
    Ok(-ll.iter().sum::<f64>() / ll.len() as f64)
}

/// All-ones masks for a batch.
pub fn ones_masks(batch: usize, dims: &[usize]) -> Vec<DenseMatrix> {
    dims.iter().map(|&d| DenseMatrix::filled(batch, d, 1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked_example() -> BackboneNet {
        BackboneNet::from_layers(vec![
            Dense {
                weights: DenseMatrix::identity(2),
                bias: vec![0.0; 2],
            },
            Dense {
                weights: DenseMatrix::identity(2),
                bias: vec![0.0; 2],
            },
        ])
        .unwrap()
    }

    #[test]
    fn worked_forward_example() {
        let net = worked_example();
        let x = DenseMatrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let masks = ones_masks(1, &[2]);
        let trace = net.forward(&x, &masks).unwrap();
        assert_eq!(trace.logits.as_slice(), &[1.0, 0.0]);
        assert!((trace.probs.get(0, 0) - 0.7310586).abs() < 1e-7);
        assert!((trace.probs.get(0, 1) - 0.2689414).abs() < 1e-7);
        assert_eq!(net.predict_logits(&x, &masks).unwrap().as_slice(), &[1.0, 0.0]);

        let ce = cross_entropy(&trace, &[1]).unwrap();
        assert!((ce - 0.2689414f64.ln().abs()).abs() < 1e-6);
        assert!((ce - 1.3132617).abs() < 1e-7);
    }

    #[test]
    fn ones_masks_match_unmasked_pass() {
        let mut rng = SeededRng::new(2);
        let net = BackboneNet::new(&[3, 5, 4, 2], &mut rng).unwrap();
        let x = DenseMatrix::from_vec(3, 3, (0..9).map(|_| rng.normal()).collect()).unwrap();
        let a = net.forward(&x, &ones_masks(3, &net.maskable_dims())).unwrap();
        let b = net.forward_unmasked(&x).unwrap();
        assert_eq!(a.probs, b.probs);
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn zero_mask_annihilates_layer() {
        let mut rng = SeededRng::new(3);
        let net = BackboneNet::new(&[3, 4, 4, 2], &mut rng).unwrap();
        let x = DenseMatrix::from_vec(2, 3, (0..6).map(|_| rng.normal()).collect()).unwrap();
        let masks = vec![DenseMatrix::filled(2, 4, 1.0), DenseMatrix::zeros(2, 4)];
        let trace = net.forward(&x, &masks).unwrap();
        assert!(trace.hidden[1].as_slice().iter().all(|&v| v == 0.0));
        // output reduces to the output bias
        for r in 0..2 {
            assert_eq!(trace.logits.row(r), net.layers[2].bias.as_slice());
        }
    }

    #[test]
    fn masked_units_are_zero() {
        let mut rng = SeededRng::new(4);
        let net = BackboneNet::new(&[2, 6, 2], &mut rng).unwrap();
        let x = DenseMatrix::from_vec(4, 2, (0..8).map(|_| rng.normal()).collect()).unwrap();
        let mask = DenseMatrix::from_vec(4, 6, (0..24).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect()).unwrap();
        let trace = net.forward(&x, std::slice::from_ref(&mask)).unwrap();
        for (h, z) in trace.hidden[0].as_slice().iter().zip(mask.as_slice()) {
            if *z == 0.0 {
                assert_eq!(*h, 0.0);
            }
        }
        for r in 0..4 {
            let s: f64 = trace.probs.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_and_scaling_commute() {
        let mut rng = SeededRng::new(8);
        let h = DenseMatrix::from_vec(3, 4, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let z = DenseMatrix::from_vec(3, 4, (0..12).map(|i| (i % 2) as f64).collect()).unwrap();
        let c = 1.7;
        let a = z.hadamard(&h.map(|v| c * v)).unwrap();
        let b = z.hadamard(&h).unwrap().map(|v| c * v);
        assert_eq!(a, b);
    }

    #[test]
    fn cross_entropy_edge_cases() {
        let net = BackboneNet::from_layers(vec![Dense::zeros(2, 3), Dense::zeros(3, 2)]).unwrap();
        let x = DenseMatrix::filled(2, 2, 0.3);
        let trace = net.forward_unmasked(&x).unwrap();
        assert!((cross_entropy(&trace, &[0, 1]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&trace, &[0, 2]).is_err());

        // all-zero input with zero biases gives zero logits
        let mut rng = SeededRng::new(1);
        let net = BackboneNet::new(&[3, 4, 3], &mut rng).unwrap();
        let logits = net
            .predict_logits(&DenseMatrix::zeros(2, 3), &ones_masks(2, &[4]))
            .unwrap();
        assert!(logits.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn confident_correct_prediction_gives_zero_loss_and_gradient() {
        // huge output bias saturates the softmax to exactly one-hot
        let mut out = Dense::zeros(2, 2);
        out.bias = vec![800.0, 0.0];
        let net = BackboneNet::from_layers(vec![Dense::zeros(2, 2), out]).unwrap();
        let x = DenseMatrix::filled(3, 2, 1.0);
        let trace = net.forward_unmasked(&x).unwrap();
        assert_eq!(cross_entropy(&trace, &[0, 0, 0]).unwrap(), 0.0);
        let g = net.backward(&trace, &[0, 0, 0]).unwrap();
        assert!(g.flatten().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn output_bias_gradient_is_mean_residual() {
        let mut rng = SeededRng::new(11);
        let net = BackboneNet::new(&[3, 4, 3], &mut rng).unwrap();
        let x = DenseMatrix::from_vec(5, 3, (0..15).map(|_| rng.normal()).collect()).unwrap();
        let labels = [0, 2, 1, 1, 0];
        let trace = net.forward_unmasked(&x).unwrap();
        let g = net.backward(&trace, &labels).unwrap();
        for c in 0..3 {
            let expected: f64 = (0..5)
                .map(|i| trace.probs.get(i, c) - f64::from(u8::from(labels[i] == c)))
                .sum::<f64>()
                / 5.0;
            assert!((g.layers[1].bias[c] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut rng = SeededRng::new(1);
        let a = BackboneNet::new(&[2, 3, 2], &mut rng).unwrap();
        let b = BackboneNet::new(&[2, 5, 2], &mut rng).unwrap();
        let trace = a.forward_unmasked(&DenseMatrix::zeros(1, 2)).unwrap();
        assert!(matches!(b.backward(&trace, &[0]), Err(Error::State(_))));
    }
}
