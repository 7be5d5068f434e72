//! Mask-generating policies.
//!
//! A [`PolicyBundle`] holds one small perceptron per maskable layer for the
//! training posterior `q(z | x, y; φ)` and for the inference prior
//! `p(z | x; ξ)`, plus the log-partition network `log Z(x, y; γ)` and optional
//! state-flow networks for detailed balance. Masks are built layer by layer:
//! the generator of layer `l` sees the unmasked activation `h′_l`, the one-hot
//! label (posterior only) and every mask already chosen for layers `< l`.
//! Units within one layer are conditionally independent Bernoullis.
//!
//! [`IdPolicy`] is the sample-independent variant: free per-unit logits and a
//! single scalar log-partition.
//!
//! Every recorded log-probability is evaluated under the untempered policy,
//! whatever distribution was used to draw the sample.

use crate::backbone::{BackboneNet, ForwardTrace};
use crate::error::{arg_err, shape_err, Result};
use crate::numeric::{
    bernoulli_log_prob, bernoulli_vector, clamp_prob, log_sigmoid, logit, sigmoid, DenseMatrix, SeededRng, PROB_FLOOR,
};
use crate::params::{join, Parameters, Scalar, Vector};
use crate::perceptron::{Perceptron, PerceptronCache};

/// Hidden width of every generator, partition and flow network.
pub const GENERATOR_HIDDEN: usize = 32;

/// Fixed per-unit keep rate of the sample-independent prior `p(z)`.
pub const ID_PRIOR_RATE: f64 = 0.5;

/// Which conditional a generator stack implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    /// `q(z | x, y; φ)`.
    Posterior,
    /// `p(z | x; ξ)`.
    Prior,
}

/// Distribution used to draw a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Tempered posterior mixed with uniform layer masks (needs labels).
    /// For an [`IdPolicy`] it is the tempered, ε-mixed `q(z; φ′)`.
    TemperedTrain,
    Posterior,
    Prior,
    /// Untempered `q(z; φ′)` of an [`IdPolicy`].
    Id,
}

/// One sampled mask per batch element, with per-sample log-probabilities.
#[derive(Debug, Clone)]
pub struct MaskTrajectory {
    /// One `(batch, d_l)` 0/1 matrix per maskable layer.
    pub masks: Vec<DenseMatrix>,
    /// `Σ_l log q_l(z_l | ...)`; absent when sampled from the prior without labels.
    pub log_q: Option<Vec<f64>>,
    /// `Σ_l log p_l(z_l | ...)` under the inference prior (or the fixed prior).
    pub log_p_prior: Vec<f64>,
    pub mode: SampleMode,
}

impl MaskTrajectory {
    pub fn batch_size(&self) -> usize {
        self.log_p_prior.len()
    }

    /// Fraction of samples with at least one fully dropped layer.
    pub fn empty_layer_fraction(&self) -> f64 {
        let b = self.batch_size();
        if b == 0 {
            return 0.0;
        }
        let empty = (0..b)
            .filter(|&i| self.masks.iter().any(|m| m.row(i).iter().all(|&z| z == 0.0)))
            .count();
        empty as f64 / b as f64
    }
}

/// Logit-scales a Bernoulli probability: `sigmoid(logit(p) / T)`, clamped.
pub fn temper(p: f64, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return arg_err(format!("temperature must be positive, got {temperature}"));
    }
    if temperature == 1.0 {
        return Ok(clamp_prob(p));
    }
    Ok(clamp_prob(sigmoid(logit(clamp_prob(p)) / temperature)))
}

/// Per-layer stack of mask generators.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorStack {
    pub nets: Vec<Perceptron>,
}

impl Parameters for GeneratorStack {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.nets.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.nets.visit_mut(prefix, f);
    }
}

impl GeneratorStack {
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }
}

/// Generator features `[h′_l ‖ onehot(y) ‖ z_1 .. z_{l-1}]`.
fn generator_features(
    unmasked: &DenseMatrix,
    labels: Option<&[usize]>,
    num_classes: usize,
    prev_masks: &[DenseMatrix],
) -> Result<DenseMatrix> {
    let batch = unmasked.rows();
    let mut parts: Vec<&DenseMatrix> = vec![unmasked];
    let onehot;
    if let Some(y) = labels {
        onehot = one_hot(y, num_classes, batch)?;
        parts.push(&onehot);
    }
    for m in prev_masks {
        if m.rows() != batch {
            return shape_err("previous mask batch size differs from activations");
        }
        parts.push(m);
    }
    DenseMatrix::hstack(&parts)
}

pub(crate) fn one_hot(labels: &[usize], k: usize, batch: usize) -> Result<DenseMatrix> {
    if labels.len() != batch {
        return arg_err(format!("{} labels for a batch of {batch}", labels.len()));
    }
    let mut m = DenseMatrix::zeros(batch, k);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return arg_err(format!("label {y} outside [0, {k})"));
        }
        m.set(i, y, 1.0);
    }
    Ok(m)
}

/// Log-probability of `mask` under per-unit logits, plus `d log p / d logit`.
///
/// The derivative is zero for units whose probability sits on the clamp.
fn bernoulli_terms(logits: &DenseMatrix, mask: &DenseMatrix) -> (Vec<f64>, DenseMatrix) {
    let mut log_p = vec![0.0; logits.rows()];
    let mut dlogit = DenseMatrix::zeros(logits.rows(), logits.cols());
    for (i, lp) in log_p.iter_mut().enumerate() {
        for (u, (&a, &z)) in logits.row(i).iter().zip(mask.row(i)).enumerate() {
            let s = sigmoid(a);
            let p = clamp_prob(s);
            if p == s {
                // ln(1 − σ(a)) = ln σ(−a)
                *lp += log_sigmoid(if z > 0.5 { a } else { -a });
                dlogit.set(i, u, z - s);
            } else {
                *lp += bernoulli_log_prob(z, p);
            }
        }
    }
    (log_p, dlogit)
}

/// GFlowOut policy networks.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBundle {
    pub posterior: GeneratorStack,
    pub prior: GeneratorStack,
    /// `[x ‖ onehot(y)] → log Z`.
    pub partition: Perceptron,
    /// Log state-flow networks for detailed balance, one per intermediate state.
    pub flows: Vec<Perceptron>,
    pub temperature: f64,
    pub epsilon: f64,
    num_classes: usize,
    mask_dims: Vec<usize>,
}

impl PolicyBundle {
    /// Fresh policies for `backbone`. Output layers start at zero, so every
    /// generator emits 0.5 and `log Z` starts at 0.
    pub fn new(backbone: &BackboneNet, temperature: f64, epsilon: f64, rng: &mut SeededRng) -> Self {
        let dims = backbone.maskable_dims();
        let k = backbone.num_classes();
        let h = GENERATOR_HIDDEN;
        let mut posterior = Vec::with_capacity(dims.len());
        let mut prior = Vec::with_capacity(dims.len());
        let mut flows = Vec::new();
        let mut before = 0;
        for (l, &d) in dims.iter().enumerate() {
            posterior.push(Perceptron::new(&[d + k + before, h, h, d], true, rng));
            prior.push(Perceptron::new(&[d + before, h, h, d], true, rng));
            if l > 0 {
                flows.push(Perceptron::new(&[d + k + before, h, h, 1], true, rng));
            }
            before += d;
        }
        let partition = Perceptron::new(&[backbone.input_dim() + k, h, h, 1], true, rng);
        Self {
            posterior: GeneratorStack { nets: posterior },
            prior: GeneratorStack { nets: prior },
            partition,
            flows,
            temperature,
            epsilon,
            num_classes: k,
            mask_dims: dims,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn mask_dims(&self) -> &[usize] {
        &self.mask_dims
    }

    fn stack(&self, kind: PolicyKind) -> &GeneratorStack {
        match kind {
            PolicyKind::Posterior => &self.posterior,
            PolicyKind::Prior => &self.prior,
        }
    }

    fn features(
        &self,
        kind: PolicyKind,
        unmasked: &DenseMatrix,
        labels: Option<&[usize]>,
        prev_masks: &[DenseMatrix],
    ) -> Result<DenseMatrix> {
        match kind {
            PolicyKind::Posterior => match labels {
                Some(y) => generator_features(unmasked, Some(y), self.num_classes, prev_masks),
                None => arg_err("the posterior generator needs labels"),
            },
            PolicyKind::Prior => generator_features(unmasked, None, self.num_classes, prev_masks),
        }
    }

    fn layer_logits(
        &self,
        kind: PolicyKind,
        layer: usize,
        unmasked: &DenseMatrix,
        labels: Option<&[usize]>,
        prev_masks: &[DenseMatrix],
    ) -> Result<DenseMatrix> {
        if layer >= self.mask_dims.len() || prev_masks.len() != layer {
            return arg_err(format!(
                "layer {layer} needs masks of exactly {layer} previous layers, got {}",
                prev_masks.len()
            ));
        }
        let feats = self.features(kind, unmasked, labels, prev_masks)?;
        self.stack(kind).nets[layer].forward(&feats)
    }

    /// Per-unit keep probabilities of hidden layer `layer`, clamped to
    /// `[1e-6, 1 - 1e-6]`.
    pub fn layer_probs(
        &self,
        kind: PolicyKind,
        layer: usize,
        unmasked: &DenseMatrix,
        labels: Option<&[usize]>,
        prev_masks: &[DenseMatrix],
    ) -> Result<DenseMatrix> {
        let logits = self.layer_logits(kind, layer, unmasked, labels, prev_masks)?;
        Ok(logits.map(|a| clamp_prob(sigmoid(a))))
    }

    /// Runs the backbone forward while drawing masks layer by layer.
    pub fn sample_trajectory(
        &self,
        backbone: &BackboneNet,
        x: &DenseMatrix,
        labels: Option<&[usize]>,
        mode: SampleMode,
        rng: &mut SeededRng,
    ) -> Result<(MaskTrajectory, ForwardTrace)> {
        let sample_kind = match mode {
            SampleMode::TemperedTrain | SampleMode::Posterior => {
                if labels.is_none() {
                    return arg_err(format!("{mode:?} sampling needs labels"));
                }
                PolicyKind::Posterior
            }
            SampleMode::Prior => PolicyKind::Prior,
            SampleMode::Id => return arg_err("Id sampling belongs to IdPolicy"),
        };
        let (temperature, epsilon) = match mode {
            SampleMode::TemperedTrain => (self.temperature, self.epsilon),
            _ => (1.0, 0.0),
        };
        if !(temperature > 0.0) || !(0.0..=1.0).contains(&epsilon) {
            return arg_err(format!("bad exploration settings: T = {temperature}, eps = {epsilon}"));
        }
        let batch = x.rows();
        let mut log_q = labels.map(|_| vec![0.0; batch]);
        let mut log_p = vec![0.0; batch];
        let mut masks: Vec<DenseMatrix> = Vec::with_capacity(self.mask_dims.len());

        let trace = backbone.forward_with(x, |l, unmasked| {
            let sample_probs = self.layer_probs(sample_kind, l, unmasked, labels, &masks)?;
            let mut mask = DenseMatrix::zeros(unmasked.rows(), unmasked.cols());
            for i in 0..batch {
                let explore = epsilon > 0.0 && rng.uniform() < epsilon;
                for (u, &p) in sample_probs.row(i).iter().enumerate() {
                    let p = if explore {
                        0.5
                    } else if temperature != 1.0 {
                        temper(p, temperature)?
                    } else {
                        p
                    };
                    if rng.uniform() < p {
                        mask.set(i, u, 1.0);
                    }
                }
            }
            // record untempered log-probabilities under both conditionals
            if let Some(lq) = log_q.as_mut() {
                let logits = self.layer_logits(PolicyKind::Posterior, l, unmasked, labels, &masks)?;
                let (lp, _) = bernoulli_terms(&logits, &mask);
                lq.iter_mut().zip(lp).for_each(|(a, b)| *a += b);
            }
            let logits = self.layer_logits(PolicyKind::Prior, l, unmasked, None, &masks)?;
            let (lp, _) = bernoulli_terms(&logits, &mask);
            log_p.iter_mut().zip(lp).for_each(|(a, b)| *a += b);
            masks.push(mask.clone());
            Ok(mask)
        })?;
        Ok((
            MaskTrajectory {
                masks,
                log_q,
                log_p_prior: log_p,
                mode,
            },
            trace,
        ))
    }

    /// Replays the layer-conditional factorization for given masks.
    pub fn log_prob_of_masks(
        &self,
        backbone: &BackboneNet,
        x: &DenseMatrix,
        labels: Option<&[usize]>,
        masks: &[DenseMatrix],
        kind: PolicyKind,
    ) -> Result<Vec<f64>> {
        let trace = backbone.forward(x, masks)?;
        self.log_prob_from_trace(&trace, labels, kind)
    }

    /// Log-probability of `trace.masks`, reading activations from the trace.
    pub fn log_prob_from_trace(
        &self,
        trace: &ForwardTrace,
        labels: Option<&[usize]>,
        kind: PolicyKind,
    ) -> Result<Vec<f64>> {
        let mut total = vec![0.0; trace.batch_size()];
        for l in 0..self.mask_dims.len() {
            let logits = self.layer_logits(kind, l, &trace.unmasked[l], labels, &trace.masks[..l])?;
            let (lp, _) = bernoulli_terms(&logits, &trace.masks[l]);
            total.iter_mut().zip(lp).for_each(|(a, b)| *a += b);
        }
        Ok(total)
    }

    /// Per-layer terms of [`Self::log_prob_from_trace`], indexed `[layer][sample]`.
    pub fn layer_log_probs(
        &self,
        trace: &ForwardTrace,
        labels: Option<&[usize]>,
        kind: PolicyKind,
    ) -> Result<Vec<Vec<f64>>> {
        (0..self.mask_dims.len())
            .map(|l| {
                let logits = self.layer_logits(kind, l, &trace.unmasked[l], labels, &trace.masks[..l])?;
                Ok(bernoulli_terms(&logits, &trace.masks[l]).0)
            })
            .collect()
    }

    /// Log-probability of `trace.masks` and the gradient of
    /// `Σ_l Σ_i upstream[l][i] · log p_l(z_{i,l})` w.r.t. the generator stack.
    pub fn log_prob_grad(
        &self,
        trace: &ForwardTrace,
        labels: Option<&[usize]>,
        kind: PolicyKind,
        upstream: &[Vec<f64>],
    ) -> Result<(Vec<f64>, GeneratorStack)> {
        if upstream.len() != self.mask_dims.len() {
            return shape_err("one upstream vector per maskable layer expected");
        }
        let stack = self.stack(kind);
        let mut total = vec![0.0; trace.batch_size()];
        let mut grads = Vec::with_capacity(stack.nets.len());
        for (l, net) in stack.nets.iter().enumerate() {
            let feats = self.features(kind, &trace.unmasked[l], labels, &trace.masks[..l])?;
            let (logits, cache) = net.forward_cached(&feats)?;
            let (lp, mut dlogit) = bernoulli_terms(&logits, &trace.masks[l]);
            total.iter_mut().zip(lp).for_each(|(a, b)| *a += b);
            if upstream[l].len() != trace.batch_size() {
                return shape_err("upstream length differs from batch size");
            }
            for (i, &g) in upstream[l].iter().enumerate() {
                dlogit.row_mut(i).iter_mut().for_each(|d| *d *= g);
            }
            let (g, _) = net.backward(&cache, &dlogit)?;
            grads.push(g);
        }
        Ok((total, GeneratorStack { nets: grads }))
    }

    fn partition_input(&self, x: &DenseMatrix, labels: &[usize]) -> Result<DenseMatrix> {
        let oh = one_hot(labels, self.num_classes, x.rows())?;
        DenseMatrix::hstack(&[x, &oh])
    }

    /// `log Z(x, y; γ)` per sample.
    pub fn log_partition(&self, x: &DenseMatrix, labels: &[usize]) -> Result<Vec<f64>> {
        let out = self.partition.forward(&self.partition_input(x, labels)?)?;
        Ok(out.into_vec())
    }

    /// `log Z` per sample and the gradient of `Σ_i upstream[i] · log Z_i`.
    pub fn log_partition_grad(
        &self,
        x: &DenseMatrix,
        labels: &[usize],
        upstream: &[f64],
    ) -> Result<(Vec<f64>, Perceptron)> {
        let (out, cache) = self.partition.forward_cached(&self.partition_input(x, labels)?)?;
        let d = DenseMatrix::from_vec(upstream.len(), 1, upstream.to_vec())?;
        let (g, _) = self.partition.backward(&cache, &d)?;
        Ok((out.into_vec(), g))
    }

    /// Log flows of the intermediate states `s_1 .. s_{L-1}` of each sample.
    pub fn log_state_flows(&self, trace: &ForwardTrace, labels: &[usize]) -> Result<Vec<Vec<f64>>> {
        Ok(self.log_state_flow_caches(trace, labels)?.0)
    }

    fn log_state_flow_caches(
        &self,
        trace: &ForwardTrace,
        labels: &[usize],
    ) -> Result<(Vec<Vec<f64>>, Vec<PerceptronCache>)> {
        let mut flows = Vec::with_capacity(self.flows.len());
        let mut caches = Vec::with_capacity(self.flows.len());
        for (j, net) in self.flows.iter().enumerate() {
            // state after layer j is described by the inputs of generator j + 1
            let l = j + 1;
            let feats = generator_features(&trace.unmasked[l], Some(labels), self.num_classes, &trace.masks[..l])?;
            let (out, cache) = net.forward_cached(&feats)?;
            flows.push(out.into_vec());
            caches.push(cache);
        }
        Ok((flows, caches))
    }

    /// Gradient of `Σ_j Σ_i upstream[j][i] · log F(s_{j+1})_i` w.r.t. the flow nets.
    pub fn log_state_flow_grad(
        &self,
        trace: &ForwardTrace,
        labels: &[usize],
        upstream: &[Vec<f64>],
    ) -> Result<(Vec<Vec<f64>>, Vec<Perceptron>)> {
        let (flows, caches) = self.log_state_flow_caches(trace, labels)?;
        let mut grads = Vec::with_capacity(self.flows.len());
        for ((net, cache), up) in self.flows.iter().zip(&caches).zip(upstream) {
            let d = DenseMatrix::from_vec(up.len(), 1, up.clone())?;
            grads.push(net.backward(cache, &d)?.0);
        }
        Ok((flows, grads))
    }
}

impl Parameters for PolicyBundle {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.posterior.visit(&join(prefix, "q"), f);
        self.prior.visit(&join(prefix, "p"), f);
        self.partition.visit(&join(prefix, "logz"), f);
        self.flows.visit(&join(prefix, "flow"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.posterior.visit_mut(&join(prefix, "q"), f);
        self.prior.visit_mut(&join(prefix, "p"), f);
        self.partition.visit_mut(&join(prefix, "logz"), f);
        self.flows.visit_mut(&join(prefix, "flow"), f);
    }
}

/// Sample-independent mask policy `q(z; φ′)` with scalar `log Z = γ′`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdPolicy {
    /// Free per-unit logits, one vector per maskable layer.
    pub logits: Vec<Vector>,
    pub log_z: Scalar,
    pub temperature: f64,
    pub epsilon: f64,
}

impl IdPolicy {
    /// All logits zero (keep probability 0.5) and `log Z = 0`.
    pub fn new(backbone: &BackboneNet, temperature: f64, epsilon: f64) -> Self {
        Self {
            logits: backbone
                .maskable_dims()
                .into_iter()
                .map(|d| Vector(vec![0.0; d]))
                .collect(),
            log_z: Scalar(0.0),
            temperature,
            epsilon,
        }
    }

    /// Keep probabilities of layer `layer`; the same for every input.
    pub fn layer_probs(&self, layer: usize) -> Vec<f64> {
        self.logits[layer].0.iter().map(|&a| clamp_prob(sigmoid(a))).collect()
    }

    /// `log Z`, independent of the input.
    pub fn log_partition(&self, batch: usize) -> Vec<f64> {
        vec![self.log_z.0; batch]
    }

    pub fn sample_trajectory(
        &self,
        backbone: &BackboneNet,
        x: &DenseMatrix,
        mode: SampleMode,
        rng: &mut SeededRng,
    ) -> Result<(MaskTrajectory, ForwardTrace)> {
        let (temperature, epsilon) = match mode {
            SampleMode::TemperedTrain => (self.temperature, self.epsilon),
            SampleMode::Id => (1.0, 0.0),
            other => return arg_err(format!("{other:?} sampling is not defined for IdPolicy")),
        };
        if self.logits.len() != backbone.maskable_dims().len() {
            return shape_err("IdPolicy layer count differs from the backbone");
        }
        let batch = x.rows();
        let trace = backbone.forward_with(x, |l, unmasked| {
            let probs = self.layer_probs(l);
            if probs.len() != unmasked.cols() {
                return shape_err("IdPolicy layer width differs from the backbone");
            }
            let sample_probs: Vec<f64> = probs.iter().map(|&p| temper(p, temperature)).collect::<Result<_>>()?;
            let mut mask = DenseMatrix::zeros(batch, probs.len());
            for i in 0..batch {
                let explore = epsilon > 0.0 && rng.uniform() < epsilon;
                for (u, &p) in sample_probs.iter().enumerate() {
                    let p = if explore { 0.5 } else { p };
                    if rng.uniform() < p {
                        mask.set(i, u, 1.0);
                    }
                }
            }
            Ok(mask)
        })?;
        let log_q = self.log_prob(&trace.masks)?;
        let log_p_prior = fixed_prior_log_prob(&trace.masks);
        Ok((
            MaskTrajectory {
                masks: trace.masks.clone(),
                log_q: Some(log_q),
                log_p_prior,
                mode,
            },
            trace,
        ))
    }

    /// `log q(z; φ′)` per sample.
    pub fn log_prob(&self, masks: &[DenseMatrix]) -> Result<Vec<f64>> {
        Ok(self.log_prob_grad(masks, &vec![0.0; batch_of(masks)])?.0)
    }

    /// `log q(z; φ′)` per sample and the gradient of `Σ_i upstream[i] · log q(z_i)`.
    pub fn log_prob_grad(&self, masks: &[DenseMatrix], upstream: &[f64]) -> Result<(Vec<f64>, Vec<Vector>)> {
        if masks.len() != self.logits.len() {
            return shape_err("mask layer count differs from IdPolicy");
        }
        let batch = batch_of(masks);
        let mut total = vec![0.0; batch];
        let mut grads = Vec::with_capacity(masks.len());
        for (mask, logits) in masks.iter().zip(&self.logits) {
            if mask.cols() != logits.0.len() || mask.rows() != batch {
                return shape_err("mask width differs from IdPolicy");
            }
            let row = DenseMatrix::from_vec(1, logits.0.len(), logits.0.clone())?;
            let mut g = vec![0.0; logits.0.len()];
            for i in 0..batch {
                let (lp, d) = bernoulli_terms(&row, &mask.select_rows(&[i]));
                total[i] += lp[0];
                for (gu, du) in g.iter_mut().zip(d.as_slice()) {
                    *gu += upstream[i] * du;
                }
            }
            grads.push(Vector(g));
        }
        Ok((total, grads))
    }
}

impl Parameters for IdPolicy {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.logits.visit(&join(prefix, "id_logits"), f);
        self.log_z.visit(&join(prefix, "id_logz"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.logits.visit_mut(&join(prefix, "id_logits"), f);
        self.log_z.visit_mut(&join(prefix, "id_logz"), f);
    }
}

fn batch_of(masks: &[DenseMatrix]) -> usize {
    masks.first().map_or(0, DenseMatrix::rows)
}

/// `log p(z)` under the fixed prior with keep rate [`ID_PRIOR_RATE`].
pub fn fixed_prior_log_prob(masks: &[DenseMatrix]) -> Vec<f64> {
    let batch = batch_of(masks);
    let p = clamp_prob(ID_PRIOR_RATE);
    (0..batch)
        .map(|i| {
            masks
                .iter()
                .flat_map(|m| m.row(i).iter())
                .map(|&z| bernoulli_log_prob(z, p))
                .sum()
        })
        .collect()
}

/// Independent keep-masks with keep probability `keep` for every unit.
pub fn bernoulli_masks(batch: usize, dims: &[usize], keep: f64, rng: &mut SeededRng) -> Result<Vec<DenseMatrix>> {
    dims.iter()
        .map(|&d| {
            let p = vec![keep; d];
            let mut data = Vec::with_capacity(batch * d);
            for _ in 0..batch {
                data.extend(bernoulli_vector(&p, rng)?);
            }
            DenseMatrix::from_vec(batch, d, data)
        })
        .collect()
}

/// The largest representable keep probability after clamping.
pub const PROB_CEIL: f64 = 1.0 - PROB_FLOOR;
