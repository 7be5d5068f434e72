//! Posterior-predictive averaging over sampled masks and uncertainty scores.

use crate::backbone::{ones_masks, BackboneNet};
use crate::error::{arg_err, Result};
use crate::metrics::ScoredLabels;
use crate::numeric::{DenseMatrix, SeededRng};
use crate::policy::{bernoulli_masks, IdPolicy, PolicyBundle, SampleMode};

/// Evidence is `exp(min(logit, EVIDENCE_CLIP))`.
pub const EVIDENCE_CLIP: f64 = 30.0;

/// Number of mask samples per input used at inference by default.
pub const DEFAULT_SAMPLES: usize = 20;

/// Where inference-time masks come from.
#[derive(Debug, Clone, Copy)]
pub enum MaskSource<'a> {
    /// Deterministic all-ones masks; any sample count collapses to one pass.
    Ones,
    /// Independent keep-masks with the given keep probability.
    Bernoulli { keep: f64 },
    /// The learned prior `p(z | x; ξ)`.
    Prior(&'a PolicyBundle),
    /// The sample-independent `q(z; φ′)`.
    Id(&'a IdPolicy),
}

impl MaskSource<'_> {
    pub fn is_deterministic(&self) -> bool {
        matches!(self, MaskSource::Ones)
    }
}

#[derive(Debug, Clone)]
pub struct PredictiveResult {
    pub mean_probs: DenseMatrix,
    pub mean_logits: DenseMatrix,
    pub per_pass_probs: Vec<DenseMatrix>,
    pub per_pass_logits: Vec<DenseMatrix>,
}

impl PredictiveResult {
    pub fn samples(&self) -> usize {
        self.per_pass_probs.len()
    }
}

/// One forward pass with masks drawn from `source`; returns `(logits, probs)`.
pub fn stochastic_pass(
    backbone: &BackboneNet,
    source: MaskSource<'_>,
    x: &DenseMatrix,
    rng: &mut SeededRng,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let batch = x.rows();
    let trace = match source {
        MaskSource::Ones => backbone.forward(x, &ones_masks(batch, &backbone.maskable_dims()))?,
        MaskSource::Bernoulli { keep } => {
            let masks = bernoulli_masks(batch, &backbone.maskable_dims(), keep, rng)?;
            backbone.forward(x, &masks)?
        }
        MaskSource::Prior(bundle) => bundle.sample_trajectory(backbone, x, None, SampleMode::Prior, rng)?.1,
        MaskSource::Id(policy) => policy.sample_trajectory(backbone, x, SampleMode::Id, rng)?.1,
    };
    Ok((trace.logits, trace.probs))
}

/// Uniform mixture of the output distributions of `m` sampled mask passes.
pub fn predictive(
    backbone: &BackboneNet,
    source: MaskSource<'_>,
    x: &DenseMatrix,
    m: usize,
    rng: &mut SeededRng,
) -> Result<PredictiveResult> {
    if m == 0 {
        return arg_err("the predictive needs at least one mask sample");
    }
    let passes = if source.is_deterministic() { 1 } else { m };
    let mut per_pass_logits = Vec::with_capacity(passes);
    let mut per_pass_probs = Vec::with_capacity(passes);
    for _ in 0..passes {
        let (logits, probs) = stochastic_pass(backbone, source, x, rng)?;
        per_pass_logits.push(logits);
        per_pass_probs.push(probs);
    }
    Ok(PredictiveResult {
        mean_probs: mean_of(&per_pass_probs),
        mean_logits: mean_of(&per_pass_logits),
        per_pass_probs,
        per_pass_logits,
    })
}

fn mean_of(parts: &[DenseMatrix]) -> DenseMatrix {
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        acc.as_mut_slice()
            .iter_mut()
            .zip(p.as_slice())
            .for_each(|(a, b)| *a += b);
    }
    let n = parts.len() as f64;
    acc.as_mut_slice().iter_mut().for_each(|a| *a /= n);
    acc
}

/// Dempster–Shafer uncertainty `K / Σ_k (e_k + 1)` with `e_k = exp(min(logit_k, 30))`.
pub fn ds_uncertainty(logits: &[f64]) -> Result<f64> {
    let k = logits.len();
    if k < 2 {
        return arg_err("Dempster-Shafer uncertainty needs at least two classes");
    }
    let s: f64 = logits.iter().map(|&a| a.min(EVIDENCE_CLIP).exp() + 1.0).sum();
    Ok(k as f64 / s)
}

/// `−Σ p ln p` in nats, with `0 ln 0 = 0`.
pub fn predictive_entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// How Dempster–Shafer scores combine over mask samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsMode {
    /// Score of the mean logits.
    MeanLogits,
    /// Mean of the per-pass scores.
    PerPass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UncertaintyMetric {
    DempsterShafer(DsMode),
    Entropy,
}

/// One uncertainty score per input row.
pub fn uncertainty_scores(result: &PredictiveResult, metric: UncertaintyMetric) -> Result<Vec<f64>> {
    match metric {
        UncertaintyMetric::DempsterShafer(DsMode::MeanLogits) => {
            result.mean_logits.row_iter().map(ds_uncertainty).collect()
        }
        UncertaintyMetric::DempsterShafer(DsMode::PerPass) => {
            let n = result.per_pass_logits.len() as f64;
            let mut acc = vec![0.0; result.mean_logits.rows()];
            for pass in &result.per_pass_logits {
                for (a, row) in acc.iter_mut().zip(pass.row_iter()) {
                    *a += ds_uncertainty(row)?;
                }
            }
            Ok(acc.into_iter().map(|a| a / n).collect())
        }
        UncertaintyMetric::Entropy => Ok(result.mean_probs.row_iter().map(predictive_entropy).collect()),
    }
}

/// Scores in-distribution rows (label `false`) and OOD rows (label `true`).
pub fn ood_scores(
    backbone: &BackboneNet,
    source: MaskSource<'_>,
    in_dist: &DenseMatrix,
    ood: &DenseMatrix,
    m: usize,
    metric: UncertaintyMetric,
    rng: &mut SeededRng,
) -> Result<ScoredLabels> {
    if in_dist.rows() == 0 || ood.rows() == 0 {
        return arg_err("OOD scoring needs non-empty in-distribution and OOD sets");
    }
    let mut scores = uncertainty_scores(&predictive(backbone, source, in_dist, m, rng)?, metric)?;
    scores.extend(uncertainty_scores(&predictive(backbone, source, ood, m, rng)?, metric)?);
    let mut labels = vec![false; in_dist.rows()];
    labels.extend(vec![true; ood.rows()]);
    ScoredLabels::new(scores, labels)
}
