//! Training objectives: rewards, trajectory balance, detailed balance, the
//! prior objective and the masked backbone objective.

use crate::backbone::{cross_entropy, BackboneNet, ForwardTrace};
use crate::data::Deformation;
use crate::error::{arg_err, shape_err, Error, Result};
use crate::numeric::DenseMatrix;
use crate::policy::{fixed_prior_log_prob, GeneratorStack, PolicyBundle, PolicyKind};

/// Where the likelihood term of the reward is measured.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardSource {
    /// The training batch itself.
    Train,
    /// A held-out batch; trajectories are sampled on it.
    Validation,
    /// A held-out batch plus the mean likelihood over deformed copies of it.
    AugmentedValidation(Vec<Deformation>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardConfig {
    /// Reward temperature multiplying the log-likelihood term.
    pub beta: f64,
    pub source: RewardSource,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            source: RewardSource::Train,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!(
                "beta must be a finite non-negative number, got {}",
                self.beta
            )));
        }
        if let RewardSource::AugmentedValidation(a) = &self.source {
            if a.is_empty() {
                return Err(Error::Config("augmented reward needs at least one augmentation".into()));
            }
        }
        Ok(())
    }

    pub fn needs_validation(&self) -> bool {
        !matches!(self.source, RewardSource::Train)
    }
}

/// Per-sample summands of the trajectory-balance residual.
#[derive(Debug, Clone, PartialEq)]
pub struct TbTerms {
    pub log_z: Vec<f64>,
    pub log_q: Vec<f64>,
    pub log_r: Vec<f64>,
}

impl TbTerms {
    fn check(&self) -> Result<()> {
        let n = self.log_z.len();
        if self.log_q.len() != n || self.log_r.len() != n {
            return shape_err("trajectory-balance terms differ in length");
        }
        for (name, v) in [("log_z", &self.log_z), ("log_q", &self.log_q), ("log_r", &self.log_r)] {
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric {
                    term: name.to_string(),
                    detail: format!("sample {i} = {}", v[i]),
                });
            }
        }
        Ok(())
    }

    /// `log Z + log q − log R` per sample.
    pub fn residuals(&self) -> Result<Vec<f64>> {
        self.check()?;
        Ok(self
            .log_z
            .iter()
            .zip(&self.log_q)
            .zip(&self.log_r)
            .map(|((z, q), r)| z + q - r)
            .collect())
    }
}

/// Combines likelihood terms into `β·(ll + mean(aug_ll)) + log p(z)`.
pub fn combine_reward(beta: f64, log_lik: &[f64], augmented_log_lik: &[Vec<f64>], log_prior: &[f64]) -> Vec<f64> {
    let q = augmented_log_lik.len();
    (0..log_lik.len())
        .map(|i| {
            let mut lik = log_lik[i];
            if q > 0 {
                lik += augmented_log_lik.iter().map(|a| a[i]).sum::<f64>() / q as f64;
            }
            beta * lik + log_prior[i]
        })
        .collect()
}

/// `log R(z) = β·log p(y | x, z; θ) + log p(z | x; ξ)` per sample.
///
/// For an augmented source, `augmented` holds deformed copies of `x`; they
/// are evaluated under the same masks, which were generated from `x`.
pub fn reward_log(
    backbone: &BackboneNet,
    prior: &PolicyBundle,
    x: &DenseMatrix,
    y: &[usize],
    masks: &[DenseMatrix],
    cfg: &RewardConfig,
    augmented: &[DenseMatrix],
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let trace = backbone.forward(x, masks)?;
    let ll = trace.log_likelihoods(y)?;
    let aug_ll = match &cfg.source {
        RewardSource::AugmentedValidation(_) => {
            if augmented.is_empty() {
                return Err(Error::Config("augmented reward without augmented inputs".into()));
            }
            augmented
                .iter()
                .map(|ax| backbone.forward(ax, masks)?.log_likelihoods(y))
                .collect::<Result<Vec<_>>>()?
        }
        _ => Vec::new(),
    };
    let lp = prior.log_prob_from_trace(&trace, None, PolicyKind::Prior)?;
    Ok(combine_reward(cfg.beta, &ll, &aug_ll, &lp))
}

/// Sample-independent reward `N·log p(y | x, z; θ′) + log p(z)` with the
/// fixed keep-rate-0.5 prior.
pub fn id_reward_log(
    backbone: &BackboneNet,
    x: &DenseMatrix,
    y: &[usize],
    masks: &[DenseMatrix],
    dataset_size: usize,
) -> Result<Vec<f64>> {
    let trace = backbone.forward(x, masks)?;
    id_reward_from_trace(&trace, y, dataset_size)
}

pub(crate) fn id_reward_from_trace(trace: &ForwardTrace, y: &[usize], dataset_size: usize) -> Result<Vec<f64>> {
    if dataset_size == 0 {
        return arg_err("dataset size must be at least 1");
    }
    let ll = trace.log_likelihoods(y)?;
    let lp = fixed_prior_log_prob(&trace.masks);
    Ok(ll.iter().zip(lp).map(|(l, p)| dataset_size as f64 * l + p).collect())
}

/// `(log Z + log q − log R)²` per sample. No backward-policy term: each mask
/// is reached by exactly one layer-ordered trajectory.
pub fn tb_loss(terms: &TbTerms) -> Result<Vec<f64>> {
    Ok(terms.residuals()?.into_iter().map(|d| d * d).collect())
}

/// Detailed-balance loss of one transition,
/// `(log[(δ + F(s)·P_F) / (δ + F(s′)·P_B)])²`.
pub fn db_loss(flow: f64, next_flow: f64, forward_prob: f64, backward_prob: f64, delta: f64) -> Result<f64> {
    if flow < 0.0 || next_flow < 0.0 {
        return arg_err(format!("negative state flow ({flow}, {next_flow})"));
    }
    if !(delta >= 0.0) {
        return arg_err(format!("delta must be non-negative, got {delta}"));
    }
    for p in [forward_prob, backward_prob] {
        if !(p > 0.0 && p <= 1.0) {
            return arg_err(format!("transition probability {p} outside (0, 1]"));
        }
    }
    let r = ((delta + flow * forward_prob) / (delta + next_flow * backward_prob)).ln();
    Ok(r * r)
}

/// `log(δ + e^a)` and its derivative `e^a / (δ + e^a)`.
fn log_delta_exp(a: f64, delta: f64) -> (f64, f64) {
    if delta == 0.0 {
        return (a, 1.0);
    }
    let ld = delta.ln();
    let m = a.max(ld);
    let v = m + ((a - m).exp() + (ld - m).exp()).ln();
    (v, (a - v).exp())
}

/// Detailed-balance loss of whole trajectories in the log domain, with the
/// gradients needed to train the policy, partition and flow networks.
#[derive(Debug, Clone)]
pub struct DbTrajectory {
    /// Per-sample sum of transition losses.
    pub loss: Vec<f64>,
    pub d_log_z: Vec<f64>,
    /// `d loss / d log P_F` per layer, per sample.
    pub d_log_pf: Vec<Vec<f64>>,
    /// `d loss / d log F(s_j)` per intermediate state, per sample.
    pub d_log_flows: Vec<Vec<f64>>,
}

/// Evaluates detailed balance along each sampled trajectory.
///
/// State flows are `F(s_0) = Z`, learned `F(s_1..s_{L-1})` and `F(s_L) = R`;
/// the backward policy is 1.
pub fn db_trajectory_loss(
    log_z: &[f64],
    log_pf: &[Vec<f64>],
    log_flows: &[Vec<f64>],
    log_r: &[f64],
    delta: f64,
) -> Result<DbTrajectory> {
    let layers = log_pf.len();
    if layers == 0 || log_flows.len() + 1 != layers {
        return shape_err("detailed balance needs one flow per intermediate state");
    }
    let batch = log_z.len();
    let mut out = DbTrajectory {
        loss: vec![0.0; batch],
        d_log_z: vec![0.0; batch],
        d_log_pf: vec![vec![0.0; batch]; layers],
        d_log_flows: vec![vec![0.0; batch]; layers - 1],
    };
    for i in 0..batch {
        for t in 0..layers {
            let from = if t == 0 { log_z[i] } else { log_flows[t - 1][i] };
            let to = if t + 1 == layers { log_r[i] } else { log_flows[t][i] };
            let (a, da) = log_delta_exp(from + log_pf[t][i], delta);
            let (b, db) = log_delta_exp(to, delta);
            let r = a - b;
            if !r.is_finite() {
                return Err(Error::Numeric {
                    term: "db_residual".into(),
                    detail: format!("sample {i}, transition {t}"),
                });
            }
            out.loss[i] += r * r;
            let g_from = 2.0 * r * da;
            out.d_log_pf[t][i] += g_from;
            if t == 0 {
                out.d_log_z[i] += g_from;
            } else {
                out.d_log_flows[t - 1][i] += g_from;
            }
            if t + 1 < layers {
                out.d_log_flows[t][i] -= 2.0 * r * db;
            }
        }
    }
    Ok(out)
}

/// Value and ξ-gradient of the prior objective.
#[derive(Debug, Clone)]
pub struct PriorObjective {
    /// Mean over the batch of `log p(z | x; ξ)`.
    pub value: f64,
    /// Gradient of `value` (an ascent direction).
    pub grad: GeneratorStack,
}

/// Mean `log p(z | x; ξ)` of masks drawn from the posterior, read off `trace`.
pub fn prior_objective(prior: &PolicyBundle, trace: &ForwardTrace) -> Result<PriorObjective> {
    let b = trace.batch_size();
    let up = vec![vec![1.0 / b as f64; b]; trace.masks.len()];
    let (lp, grad) = prior.log_prob_grad(trace, None, PolicyKind::Prior, &up)?;
    Ok(PriorObjective {
        value: lp.iter().sum::<f64>() / b as f64,
        grad,
    })
}

/// Masked cross-entropy and its θ-gradient.
///
/// The bound's gradient carries a factor `N / B`; it is folded into the
/// backbone learning rate, so `grad` is the plain mean-cross-entropy
/// gradient and `scale` only records the factor.
#[derive(Debug, Clone)]
pub struct BackboneObjective {
    pub cross_entropy: f64,
    pub grad: BackboneNet,
    pub scale: f64,
}

pub fn backbone_objective(
    backbone: &BackboneNet,
    trace: &ForwardTrace,
    labels: &[usize],
    dataset_size: usize,
) -> Result<BackboneObjective> {
    let ce = cross_entropy(trace, labels)?;
    let grad = backbone.backward(trace, labels)?;
    Ok(BackboneObjective {
        cross_entropy: ce,
        grad,
        scale: dataset_size as f64 / trace.batch_size() as f64,
    })
}
