//! Alternating optimization of the backbone and the mask policies.
//!
//! Every step draws one trajectory per batch element, computes all losses from
//! that single trajectory, then updates the backbone, the posterior and
//! partition networks, and the prior in that order. Each update function only
//! borrows the parameter group it changes, so no gradient can leak between
//! groups.

use std::fmt;
use std::str::FromStr;

use crate::backbone::{ones_masks, BackboneNet, ForwardTrace};
use crate::data::{Dataset, LabeledBatch};
use crate::error::{arg_err, Error, Result};
use crate::inference::{predictive, MaskSource, PredictiveResult, DEFAULT_SAMPLES};
use crate::metrics::{accuracy, mean_cross_entropy};
use crate::numeric::{DenseMatrix, SeededRng};
use crate::objectives::{
    backbone_objective, combine_reward, db_trajectory_loss, prior_objective, tb_loss, RewardConfig, RewardSource,
    TbTerms,
};
use crate::optim::{Adam, AdamConfig};
use crate::params::{join, Parameters, Scalar};
use crate::perceptron::Perceptron;
use crate::policy::{
    bernoulli_masks, fixed_prior_log_prob, GeneratorStack, IdPolicy, PolicyBundle, PolicyKind, SampleMode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    GFlowOut,
    IdGFlowOut,
    RandomDropout,
    McDropout,
    None,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::GFlowOut => "gflowout",
            Method::IdGFlowOut => "id-gflowout",
            Method::RandomDropout => "random-dropout",
            Method::McDropout => "mc-dropout",
            Method::None => "none",
        }
    }

    pub fn learns_masks(self) -> bool {
        matches!(self, Method::GFlowOut | Method::IdGFlowOut)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gflowout" => Method::GFlowOut,
            "id-gflowout" => Method::IdGFlowOut,
            "random-dropout" => Method::RandomDropout,
            "mc-dropout" => Method::McDropout,
            "none" => Method::None,
            other => return Err(Error::Config(format!("unknown method '{other}'"))),
        })
    }
}

/// Mask-policy objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    TrajectoryBalance,
    DetailedBalance,
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tb" => Ok(Objective::TrajectoryBalance),
            "db" => Ok(Objective::DetailedBalance),
            other => Err(Error::Config(format!("unknown objective '{other}'"))),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::TrajectoryBalance => "tb",
            Objective::DetailedBalance => "db",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub backbone: f64,
    pub policy: f64,
    pub partition: f64,
    pub prior: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            backbone: 1e-3,
            policy: 1e-3,
            partition: 1e-2,
            prior: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRunConfig {
    pub method: Method,
    pub objective: Objective,
    pub reward: RewardConfig,
    pub temperature: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    /// Drop probability `r` of the dropout baselines.
    pub dropout_rate: f64,
    pub patience: usize,
    pub seed: u64,
    /// Mask samples per input for validation and evaluation.
    pub inference_samples: usize,
    /// Stabilizer of the detailed-balance ratio.
    pub db_delta: f64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            method: Method::GFlowOut,
            objective: Objective::TrajectoryBalance,
            reward: RewardConfig::default(),
            temperature: 2.0,
            epsilon: 0.1,
            epochs: 50,
            batch_size: 32,
            lr: LearningRates::default(),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            hidden: vec![32, 32],
            dropout_rate: 0.5,
            patience: 5,
            seed: 0,
            inference_samples: DEFAULT_SAMPLES,
            db_delta: 1e-8,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.reward.validate()?;
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.inference_samples == 0 {
            return bad("M_inference must be at least 1".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon {} outside [0, 1]", self.epsilon));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1]", self.dropout_rate));
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        let lr = self.lr;
        if [lr.backbone, lr.policy, lr.partition, lr.prior]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return bad("learning rates must be non-negative".into());
        }
        if self.method == Method::IdGFlowOut && self.objective == Objective::DetailedBalance {
            return bad("id-gflowout trains with trajectory balance only".into());
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> Adam {
        Adam::new(AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        })
    }
}

/// A backbone together with whatever produces its masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub method: Method,
    pub dropout_rate: f64,
    pub backbone: BackboneNet,
    pub policy: Option<PolicyBundle>,
    pub id_policy: Option<IdPolicy>,
}

impl Model {
    /// Fresh model with `layer_dims = [input, hidden.., classes]`.
    pub fn new(cfg: &TrainRunConfig, layer_dims: &[usize], rng: &mut SeededRng) -> Result<Self> {
        let backbone = BackboneNet::new(layer_dims, rng)?;
        let policy =
            (cfg.method == Method::GFlowOut).then(|| PolicyBundle::new(&backbone, cfg.temperature, cfg.epsilon, rng));
        let id_policy =
            (cfg.method == Method::IdGFlowOut).then(|| IdPolicy::new(&backbone, cfg.temperature, cfg.epsilon));
        Ok(Self {
            method: cfg.method,
            dropout_rate: cfg.dropout_rate,
            backbone,
            policy,
            id_policy,
        })
    }

    fn bundle(&self) -> Result<&PolicyBundle> {
        self.policy
            .as_ref()
            .ok_or_else(|| Error::State("gflowout model without policy networks".into()))
    }

    fn id(&self) -> Result<&IdPolicy> {
        self.id_policy
            .as_ref()
            .ok_or_else(|| Error::State("id-gflowout model without its policy".into()))
    }

    /// Inference-time mask distribution of the method.
    pub fn inference_source(&self) -> Result<MaskSource<'_>> {
        Ok(match self.method {
            Method::GFlowOut => MaskSource::Prior(self.bundle()?),
            Method::IdGFlowOut => MaskSource::Id(self.id()?),
            Method::McDropout => MaskSource::Bernoulli {
                keep: 1.0 - self.dropout_rate,
            },
            Method::RandomDropout | Method::None => MaskSource::Ones,
        })
    }

    pub fn predict(&self, x: &DenseMatrix, m: usize, rng: &mut SeededRng) -> Result<PredictiveResult> {
        predictive(&self.backbone, self.inference_source()?, x, m, rng)
    }

    /// `(accuracy, mean cross-entropy)` of the posterior predictive.
    pub fn evaluate(&self, data: &Dataset, m: usize, rng: &mut SeededRng) -> Result<(f64, f64)> {
        let r = self.predict(&data.x, m, rng)?;
        Ok((
            accuracy(&r.mean_probs, &data.y)?,
            mean_cross_entropy(&r.mean_probs, &data.y)?,
        ))
    }
}

impl Parameters for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.backbone.visit(&join(prefix, "theta"), f);
        if let Some(p) = &self.policy {
            p.visit(prefix, f);
        }
        if let Some(p) = &self.id_policy {
            p.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.backbone.visit_mut(&join(prefix, "theta"), f);
        if let Some(p) = &mut self.policy {
            p.visit_mut(prefix, f);
        }
        if let Some(p) = &mut self.id_policy {
            p.visit_mut(prefix, f);
        }
    }
}

/// Optimizer state of the mask-policy groups.
#[derive(Debug, Clone)]
pub struct PolicyOptimizers {
    pub posterior: Adam,
    pub partition: Adam,
    pub flows: Adam,
    pub prior: Adam,
}

#[derive(Debug, Clone)]
pub struct Optimizers {
    pub backbone: Adam,
    pub policy: PolicyOptimizers,
    pub id_logits: Adam,
    pub id_log_z: Adam,
}

impl Optimizers {
    pub fn new(cfg: &TrainRunConfig) -> Self {
        let lr = cfg.lr;
        Self {
            backbone: cfg.adam(lr.backbone),
            policy: PolicyOptimizers {
                posterior: cfg.adam(lr.policy),
                partition: cfg.adam(lr.partition),
                flows: cfg.adam(lr.policy),
                prior: cfg.adam(lr.prior),
            },
            id_logits: cfg.adam(lr.policy),
            id_log_z: cfg.adam(lr.partition),
        }
    }
}

/// Everything that changes during a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub cfg: TrainRunConfig,
    pub model: Model,
    pub opt: Optimizers,
    pub rng: SeededRng,
    /// Grid shape of the inputs, needed by rotation augmentations.
    pub grid: Option<(usize, usize)>,
    pub steps: u64,
}

impl TrainState {
    pub fn new(cfg: TrainRunConfig, layer_dims: &[usize]) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(&cfg, layer_dims, &mut SeededRng::with_stream(cfg.seed, 0))?;
        Ok(Self {
            opt: Optimizers::new(&cfg),
            rng: SeededRng::with_stream(cfg.seed, 1),
            model,
            cfg,
            grid: None,
            steps: 0,
        })
    }

    /// Continues from an existing model with fresh optimizer state.
    pub fn from_model(cfg: TrainRunConfig, model: Model) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            opt: Optimizers::new(&cfg),
            rng: SeededRng::with_stream(cfg.seed, 1),
            model,
            cfg,
            grid: None,
            steps: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepMetrics {
    pub cross_entropy: f64,
    /// Mean trajectory-balance (or detailed-balance) loss; 0 for baselines.
    pub policy_loss: f64,
    pub mean_abs_log_z: f64,
    /// Fraction of samples with a fully dropped layer.
    pub zero_mask_freq: f64,
}

/// Fraction of rows with at least one all-zero layer mask.
pub fn zero_mask_fraction(masks: &[DenseMatrix]) -> f64 {
    let Some(first) = masks.first() else { return 0.0 };
    let b = first.rows();
    if b == 0 {
        return 0.0;
    }
    let empty = (0..b)
        .filter(|&i| masks.iter().any(|m| m.row(i).iter().all(|&z| z == 0.0)))
        .count();
    empty as f64 / b as f64
}

/// Masks of the non-learned methods.
pub fn baseline_mask_source(
    method: Method,
    rate: f64,
    training: bool,
    batch: usize,
    dims: &[usize],
    rng: &mut SeededRng,
) -> Result<Vec<DenseMatrix>> {
    if !(0.0..=1.0).contains(&rate) {
        return arg_err(format!("dropout rate {rate} outside [0, 1]"));
    }
    match method {
        Method::None => Ok(ones_masks(batch, dims)),
        Method::RandomDropout if !training => Ok(ones_masks(batch, dims)),
        Method::RandomDropout | Method::McDropout => bernoulli_masks(batch, dims, 1.0 - rate, rng),
        m => arg_err(format!("{m} masks come from a learned policy")),
    }
}

fn check_finite(term: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            term: term.into(),
            detail: format!("value {v}"),
        })
    }
}

/// One descent step of the backbone on masked cross-entropy. Returns the loss.
pub fn update_backbone(
    backbone: &mut BackboneNet,
    opt: &mut Adam,
    trace: &ForwardTrace,
    labels: &[usize],
) -> Result<f64> {
    let obj = backbone_objective(backbone, trace, labels, trace.batch_size())?;
    check_finite("cross_entropy", obj.cross_entropy)?;
    opt.descend(backbone, &obj.grad)?;
    Ok(obj.cross_entropy)
}

/// Mean trajectory-balance loss of the posterior and partition networks on a
/// frozen trajectory, with its gradients.
#[derive(Debug, Clone)]
pub struct TbGradient {
    pub loss: f64,
    pub log_z: Vec<f64>,
    pub posterior: GeneratorStack,
    pub partition: Perceptron,
}

pub fn tb_gradient(bundle: &PolicyBundle, trace: &ForwardTrace, labels: &[usize], log_r: &[f64]) -> Result<TbGradient> {
    let b = trace.batch_size();
    let log_q = bundle.log_prob_from_trace(trace, Some(labels), PolicyKind::Posterior)?;
    let log_z = bundle.log_partition(&trace.input, labels)?;
    let terms = TbTerms {
        log_z: log_z.clone(),
        log_q,
        log_r: log_r.to_vec(),
    };
    let losses = tb_loss(&terms)?;
    let up: Vec<f64> = terms.residuals()?.iter().map(|r| 2.0 * r / b as f64).collect();
    let layers = bundle.mask_dims().len();
    let (_, posterior) = bundle.log_prob_grad(trace, Some(labels), PolicyKind::Posterior, &vec![up.clone(); layers])?;
    let (_, partition) = bundle.log_partition_grad(&trace.input, labels, &up)?;
    Ok(TbGradient {
        loss: losses.iter().sum::<f64>() / b as f64,
        log_z,
        posterior,
        partition,
    })
}

/// Updates the posterior and partition networks (and the flow networks under
/// detailed balance). Returns `(mean loss, mean |log Z|)`.
pub fn update_policy(
    bundle: &mut PolicyBundle,
    opt: &mut PolicyOptimizers,
    trace: &ForwardTrace,
    labels: &[usize],
    log_r: &[f64],
    objective: Objective,
    db_delta: f64,
) -> Result<(f64, f64)> {
    let b = trace.batch_size() as f64;
    match objective {
        Objective::TrajectoryBalance => {
            let g = tb_gradient(bundle, trace, labels, log_r)?;
            check_finite("tb_loss", g.loss)?;
            opt.posterior.descend(&mut bundle.posterior, &g.posterior)?;
            opt.partition.descend(&mut bundle.partition, &g.partition)?;
            Ok((g.loss, g.log_z.iter().map(|v| v.abs()).sum::<f64>() / b))
        }
        Objective::DetailedBalance => {
            let log_pf = bundle.layer_log_probs(trace, Some(labels), PolicyKind::Posterior)?;
            let log_z = bundle.log_partition(&trace.input, labels)?;
            let log_flows = bundle.log_state_flows(trace, labels)?;
            let db = db_trajectory_loss(&log_z, &log_pf, &log_flows, log_r, db_delta)?;
            let loss = db.loss.iter().sum::<f64>() / b;
            check_finite("db_loss", loss)?;
            let scale = |v: &Vec<f64>| v.iter().map(|g| g / b).collect::<Vec<f64>>();
            let up_pf: Vec<Vec<f64>> = db.d_log_pf.iter().map(scale).collect();
            let up_fl: Vec<Vec<f64>> = db.d_log_flows.iter().map(scale).collect();
            let (_, g_post) = bundle.log_prob_grad(trace, Some(labels), PolicyKind::Posterior, &up_pf)?;
            let (_, g_part) = bundle.log_partition_grad(&trace.input, labels, &scale(&db.d_log_z))?;
            let (_, g_flows) = bundle.log_state_flow_grad(trace, labels, &up_fl)?;
            opt.posterior.descend(&mut bundle.posterior, &g_post)?;
            opt.partition.descend(&mut bundle.partition, &g_part)?;
            opt.flows.descend(&mut bundle.flows, &g_flows)?;
            Ok((loss, log_z.iter().map(|v| v.abs()).sum::<f64>() / b))
        }
    }
}

/// One ascent step of the prior on the masks recorded in `trace`.
pub fn update_prior(bundle: &mut PolicyBundle, opt: &mut Adam, trace: &ForwardTrace) -> Result<f64> {
    let obj = prior_objective(bundle, trace)?;
    check_finite("prior_objective", obj.value)?;
    opt.ascend(&mut bundle.prior, &obj.grad)?;
    Ok(obj.value)
}

/// Trajectory-balance step of the sample-independent policy.
pub fn update_id_policy(
    policy: &mut IdPolicy,
    logits_opt: &mut Adam,
    log_z_opt: &mut Adam,
    masks: &[DenseMatrix],
    log_r: &[f64],
) -> Result<(f64, f64)> {
    let b = log_r.len();
    let log_q = policy.log_prob(masks)?;
    let terms = TbTerms {
        log_z: policy.log_partition(b),
        log_q,
        log_r: log_r.to_vec(),
    };
    let losses = tb_loss(&terms)?;
    let up: Vec<f64> = terms.residuals()?.iter().map(|r| 2.0 * r / b as f64).collect();
    let (_, g_logits) = policy.log_prob_grad(masks, &up)?;
    let g_log_z = Scalar(up.iter().sum());
    let loss = losses.iter().sum::<f64>() / b as f64;
    check_finite("tb_loss", loss)?;
    logits_opt.descend(&mut policy.logits, &g_logits)?;
    log_z_opt.descend(&mut policy.log_z, &g_log_z)?;
    Ok((loss, policy.log_z.0.abs()))
}

/// Likelihood terms of the reward on `trace`: the plain log-likelihoods and,
/// for the augmented source, those of deformed copies under the same masks.
fn reward_likelihoods(
    state_cfg: &RewardConfig,
    backbone: &BackboneNet,
    trace: &ForwardTrace,
    labels: &[usize],
    grid: Option<(usize, usize)>,
    rng: &mut SeededRng,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let ll = trace.log_likelihoods(labels)?;
    let mut aug = Vec::new();
    if let RewardSource::AugmentedValidation(defs) = &state_cfg.source {
        for d in defs {
            let ax = d.apply_features(&trace.input, grid, rng)?;
            aug.push(backbone.forward(&ax, &trace.masks)?.log_likelihoods(labels)?);
        }
    }
    Ok((ll, aug))
}

/// One training step on `batch`. `reward_batch` supplies held-out data when
/// the reward is measured on validation data.
pub fn train_step(
    state: &mut TrainState,
    batch: &LabeledBatch,
    reward_batch: Option<&LabeledBatch>,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return arg_err("empty training batch");
    }
    state.steps += 1;
    let cfg = &state.cfg;
    let model = &mut state.model;
    let rng = &mut state.rng;
    let dims = model.backbone.maskable_dims();
    let held_out = if cfg.reward.needs_validation() {
        Some(reward_batch.ok_or_else(|| Error::Config("validation-based reward without a validation batch".into()))?)
    } else {
        None
    };

    match model.method {
        Method::None | Method::RandomDropout | Method::McDropout => {
            let masks = baseline_mask_source(model.method, model.dropout_rate, true, batch.len(), &dims, rng)?;
            let trace = model.backbone.forward(&batch.x, &masks)?;
            let ce = update_backbone(&mut model.backbone, &mut state.opt.backbone, &trace, &batch.y)?;
            Ok(StepMetrics {
                cross_entropy: ce,
                zero_mask_freq: zero_mask_fraction(&masks),
                ..StepMetrics::default()
            })
        }
        Method::GFlowOut => {
            let bundle = model
                .policy
                .as_mut()
                .ok_or_else(|| Error::State("gflowout model without policy networks".into()))?;
            let (traj, trace) = bundle.sample_trajectory(
                &model.backbone,
                &batch.x,
                Some(&batch.y),
                SampleMode::TemperedTrain,
                rng,
            )?;
            let (r_trace, r_labels) = match held_out {
                Some(v) => {
                    let (_, t) =
                        bundle.sample_trajectory(&model.backbone, &v.x, Some(&v.y), SampleMode::TemperedTrain, rng)?;
                    (t, &v.y)
                }
                None => (trace.clone(), &batch.y),
            };
            // every loss below reads the backbone as it was at step start
            let (ll, aug) = reward_likelihoods(&cfg.reward, &model.backbone, &r_trace, r_labels, state.grid, rng)?;
            let log_prior = bundle.log_prob_from_trace(&r_trace, None, PolicyKind::Prior)?;
            let log_r = combine_reward(cfg.reward.beta, &ll, &aug, &log_prior);
            let backbone_obj = backbone_objective(&model.backbone, &trace, &batch.y, batch.dataset_size)?;
            check_finite("cross_entropy", backbone_obj.cross_entropy)?;

            state.opt.backbone.descend(&mut model.backbone, &backbone_obj.grad)?;
            let (loss, abs_z) = update_policy(
                bundle,
                &mut state.opt.policy,
                &r_trace,
                r_labels,
                &log_r,
                cfg.objective,
                cfg.db_delta,
            )?;
            update_prior(bundle, &mut state.opt.policy.prior, &trace)?;
            Ok(StepMetrics {
                cross_entropy: backbone_obj.cross_entropy,
                policy_loss: loss,
                mean_abs_log_z: abs_z,
                zero_mask_freq: traj.empty_layer_fraction(),
            })
        }
        Method::IdGFlowOut => {
            let policy = model
                .id_policy
                .as_mut()
                .ok_or_else(|| Error::State("id-gflowout model without its policy".into()))?;
            let (traj, trace) = policy.sample_trajectory(&model.backbone, &batch.x, SampleMode::TemperedTrain, rng)?;
            let (r_trace, r_labels, n) = match held_out {
                Some(v) => {
                    let (_, t) = policy.sample_trajectory(&model.backbone, &v.x, SampleMode::TemperedTrain, rng)?;
                    (t, &v.y, v.dataset_size)
                }
                None => (trace.clone(), &batch.y, batch.dataset_size),
            };
            let (ll, aug) = reward_likelihoods(&cfg.reward, &model.backbone, &r_trace, r_labels, state.grid, rng)?;
            let log_prior = fixed_prior_log_prob(&r_trace.masks);
            let log_r = combine_reward(cfg.reward.beta * n as f64, &ll, &aug, &log_prior);
            let ce = update_backbone(&mut model.backbone, &mut state.opt.backbone, &trace, &batch.y)?;
            let (loss, abs_z) = update_id_policy(
                policy,
                &mut state.opt.id_logits,
                &mut state.opt.id_log_z,
                &r_trace.masks,
                &log_r,
            )?;
            Ok(StepMetrics {
                cross_entropy: ce,
                policy_loss: loss,
                mean_abs_log_z: abs_z,
                zero_mask_freq: traj.empty_layer_fraction(),
            })
        }
    }
}

/// One row of the per-epoch history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_ce: f64,
    pub val_ce: f64,
    pub val_acc: f64,
    pub mean_tb_loss: f64,
    pub mean_abs_log_z: f64,
    pub zero_mask_freq: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Snapshot with the best validation accuracy.
    pub best: Model,
    pub best_epoch: usize,
    /// State after the last epoch.
    pub last: TrainState,
    pub history: Vec<HistoryRow>,
}

/// Runs whole epochs of [`train_step`] over seeded shuffles of `train`.
pub fn run_epoch(state: &mut TrainState, train: &Dataset, val: Option<&Dataset>) -> Result<StepMetrics> {
    let b = state.cfg.batch_size;
    let perm = state.rng.permutation(train.len());
    let mut sum = StepMetrics::default();
    let mut steps = 0;
    for chunk in perm.chunks(b) {
        let batch = train.batch(chunk);
        let reward_batch = match (state.cfg.reward.needs_validation(), val) {
            (true, Some(v)) => {
                let idx: Vec<usize> = (0..b.min(v.len())).map(|_| state.rng.below(v.len())).collect();
                Some(v.batch(&idx))
            }
            (true, None) => return Err(Error::Config("validation reward without validation data".into())),
            _ => None,
        };
        let m = train_step(state, &batch, reward_batch.as_ref())?;
        sum.cross_entropy += m.cross_entropy;
        sum.policy_loss += m.policy_loss;
        sum.mean_abs_log_z += m.mean_abs_log_z;
        sum.zero_mask_freq += m.zero_mask_freq;
        steps += 1;
    }
    let n = steps as f64;
    Ok(StepMetrics {
        cross_entropy: sum.cross_entropy / n,
        policy_loss: sum.policy_loss / n,
        mean_abs_log_z: sum.mean_abs_log_z / n,
        zero_mask_freq: sum.zero_mask_freq / n,
    })
}

/// Trains with early stopping on validation accuracy, with ties broken by
/// lower validation cross-entropy.
///
/// After the best epoch `e`, training stops once `patience + 1` further
/// epochs bring no improvement, so at most `e + patience + 1` epochs run.
pub fn fit(cfg: &TrainRunConfig, train: &Dataset, val: &Dataset) -> Result<FitResult> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    if train.num_features() != val.num_features() || train.num_classes() != val.num_classes() {
        return Err(Error::Config("training and validation sets differ in shape".into()));
    }
    let mut dims = vec![train.num_features()];
    dims.extend(&cfg.hidden);
    dims.push(train.num_classes());
    let mut state = TrainState::new(cfg.clone(), &dims)?;
    state.grid = train.meta.grid;
    fit_from(state, train, val, cfg.epochs)
}

/// [`fit`] starting from an existing state.
pub fn fit_from(mut state: TrainState, train: &Dataset, val: &Dataset, epochs: usize) -> Result<FitResult> {
    let mut history = Vec::with_capacity(epochs);
    let mut best = state.model.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_ce = f64::INFINITY;
    let mut best_epoch = 0;
    for epoch in 1..=epochs {
        let m = run_epoch(&mut state, train, Some(val))?;
        let mut eval_rng = SeededRng::with_stream(state.cfg.seed, 1000 + epoch as u64);
        let (val_acc, val_ce) = state.model.evaluate(val, state.cfg.inference_samples, &mut eval_rng)?;
        history.push(HistoryRow {
            epoch,
            train_ce: m.cross_entropy,
            val_ce,
            val_acc,
            mean_tb_loss: m.policy_loss,
            mean_abs_log_z: m.mean_abs_log_z,
            zero_mask_freq: m.zero_mask_freq,
        });
        if val_acc > best_acc || (val_acc == best_acc && val_ce < best_ce) {
            best_acc = val_acc;
            best_ce = val_ce;
            best_epoch = epoch;
            best = state.model.clone();
        } else if epoch - best_epoch > state.cfg.patience {
            break;
        }
    }
    Ok(FitResult {
        best,
        best_epoch,
        last: state,
        history,
    })
}

/// Test accuracy after fine-tuning on a clean subset of a given size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptationRow {
    pub subset_size: usize,
    pub accuracy: f64,
}

/// Trains on noisy labels, then fine-tunes the best snapshot separately on
/// the first `size` rows of `clean` for every requested size. The subsets
/// are therefore nested.
pub fn adaptation_protocol(
    cfg: &TrainRunConfig,
    noisy_train: &Dataset,
    val: &Dataset,
    clean: &Dataset,
    sizes: &[usize],
    finetune_epochs: usize,
    test: &Dataset,
) -> Result<Vec<AdaptationRow>> {
    if noisy_train.overlaps(clean) {
        return Err(Error::Config("clean subsets overlap the noisy training set".into()));
    }
    if let Some(&s) = sizes.iter().find(|&&s| s > clean.len()) {
        return Err(Error::Config(format!(
            "subset size {s} exceeds {} clean rows",
            clean.len()
        )));
    }
    let noisy = fit(cfg, noisy_train, val)?;
    let m = cfg.inference_samples;
    sizes
        .iter()
        .map(|&size| {
            let mut eval_rng = SeededRng::with_stream(cfg.seed, 2000);
            let model = if size == 0 {
                noisy.best.clone()
            } else {
                let subset = clean.subset(&(0..size).collect::<Vec<_>>());
                let mut state = TrainState::from_model(cfg.clone(), noisy.best.clone())?;
                state.grid = clean.meta.grid;
                for _ in 0..finetune_epochs {
                    run_epoch(&mut state, &subset, Some(val))?;
                }
                state.model
            };
            let (acc, _) = model.evaluate(test, m, &mut eval_rng)?;
            Ok(AdaptationRow {
                subset_size: size,
                accuracy: acc,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{circle_centers, gen_blobs, split};

    fn blobs(seed: u64) -> (Dataset, Dataset, Dataset) {
        let centers = circle_centers(3, 3.0, 2, 0.0);
        split(&gen_blobs(seed, 300, 3, &centers, 0.6).unwrap(), [0.6, 0.2, 0.2], seed).unwrap()
    }

    fn small_cfg(method: Method) -> TrainRunConfig {
        TrainRunConfig {
            method,
            hidden: vec![8, 8],
            epochs: 3,
            batch_size: 16,
            inference_samples: 4,
            ..TrainRunConfig::default()
        }
    }

    fn state_for(cfg: &TrainRunConfig, data: &Dataset) -> TrainState {
        let mut dims = vec![data.num_features()];
        dims.extend(&cfg.hidden);
        dims.push(data.num_classes());
        TrainState::new(cfg.clone(), &dims).unwrap()
    }

    #[test]
    fn parse_names() {
        for m in [
            Method::GFlowOut,
            Method::IdGFlowOut,
            Method::RandomDropout,
            Method::McDropout,
            Method::None,
        ] {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!(matches!("dropout".parse::<Method>(), Err(Error::Config(_))));
        assert_eq!("db".parse::<Objective>().unwrap(), Objective::DetailedBalance);
        assert_eq!(Objective::TrajectoryBalance.to_string(), "tb");
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = small_cfg(Method::IdGFlowOut);
        cfg.objective = Objective::DetailedBalance;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = TrainRunConfig {
            batch_size: 0,
            ..TrainRunConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainRunConfig {
            epsilon: 1.5,
            ..TrainRunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn baseline_masks() {
        let mut rng = SeededRng::new(3);
        let dims = [40, 25];
        let none = baseline_mask_source(Method::None, 0.5, true, 10, &dims, &mut rng).unwrap();
        assert_eq!(none, ones_masks(10, &dims));
        let r0 = baseline_mask_source(Method::McDropout, 0.0, true, 10, &dims, &mut rng).unwrap();
        assert_eq!(r0, none);
        let r1 = baseline_mask_source(Method::McDropout, 1.0, true, 10, &dims, &mut rng).unwrap();
        assert!(r1.iter().all(|m| m.as_slice().iter().all(|&z| z == 0.0)));
        assert_eq!(zero_mask_fraction(&r1), 1.0);
        let eval = baseline_mask_source(Method::RandomDropout, 0.5, false, 10, &dims, &mut rng).unwrap();
        assert_eq!(eval, none);
        let half = baseline_mask_source(Method::RandomDropout, 0.5, true, 1000, &dims, &mut rng).unwrap();
        let (kept, total) = half.iter().fold((0.0, 0usize), |(k, t), m| {
            (k + m.as_slice().iter().sum::<f64>(), t + m.as_slice().len())
        });
        let freq = kept / total as f64;
        assert!((0.494..=0.506).contains(&freq), "{freq}");
        assert!(baseline_mask_source(Method::GFlowOut, 0.5, true, 1, &dims, &mut rng).is_err());
        assert!(baseline_mask_source(Method::McDropout, 1.5, true, 1, &dims, &mut rng).is_err());
    }

    #[test]
    fn baseline_training_leaves_injected_policy_untouched() {
        let (train, _, _) = blobs(1);
        let cfg = small_cfg(Method::None);
        let mut state = state_for(&cfg, &train);
        let mut rng = SeededRng::new(9);
        state.model.policy = Some(PolicyBundle::new(&state.model.backbone, 2.0, 0.1, &mut rng));
        let before = state.model.policy.clone().unwrap();
        let theta = state.model.backbone.clone();
        run_epoch(&mut state, &train, None).unwrap();
        assert!(state.model.policy.as_ref().unwrap().bit_equal(&before));
        assert!(!state.model.backbone.bit_equal(&theta));
    }

    #[test]
    fn frozen_groups_stay_bit_identical() {
        let (train, _, _) = blobs(2);
        let batch = train.batch(&(0..16).collect::<Vec<_>>());

        // policy-only: the backbone learning rate is zero
        let mut cfg = small_cfg(Method::GFlowOut);
        cfg.lr.backbone = 0.0;
        let mut state = state_for(&cfg, &train);
        let theta = state.model.backbone.clone();
        let policy = state.model.policy.clone().unwrap();
        for _ in 0..5 {
            train_step(&mut state, &batch, None).unwrap();
        }
        assert!(state.model.backbone.bit_equal(&theta));
        assert!(!state.model.policy.as_ref().unwrap().bit_equal(&policy));

        // backbone-only: every policy learning rate is zero
        let mut cfg = small_cfg(Method::GFlowOut);
        cfg.lr = LearningRates {
            backbone: 1e-3,
            policy: 0.0,
            partition: 0.0,
            prior: 0.0,
        };
        let mut state = state_for(&cfg, &train);
        let theta = state.model.backbone.clone();
        let policy = state.model.policy.clone().unwrap();
        for _ in 0..5 {
            train_step(&mut state, &batch, None).unwrap();
        }
        assert!(state.model.policy.as_ref().unwrap().bit_equal(&policy));
        assert!(!state.model.backbone.bit_equal(&theta));
    }

    #[test]
    fn update_functions_touch_only_their_group() {
        let (train, _, _) = blobs(3);
        let cfg = small_cfg(Method::GFlowOut);
        let mut state = state_for(&cfg, &train);
        let batch = train.batch(&(0..8).collect::<Vec<_>>());
        let bundle = state.model.policy.as_mut().unwrap();
        let (_, trace) = bundle
            .sample_trajectory(
                &state.model.backbone,
                &batch.x,
                Some(&batch.y),
                SampleMode::TemperedTrain,
                &mut state.rng,
            )
            .unwrap();
        let log_r = vec![-1.0; 8];
        let prior = bundle.prior.clone();
        let theta = state.model.backbone.clone();
        update_policy(
            bundle,
            &mut state.opt.policy,
            &trace,
            &batch.y,
            &log_r,
            Objective::TrajectoryBalance,
            0.0,
        )
        .unwrap();
        assert!(bundle.prior.bit_equal(&prior));
        assert!(state.model.backbone.bit_equal(&theta));
        let post = bundle.posterior.clone();
        let part = bundle.partition.clone();
        update_prior(bundle, &mut state.opt.policy.prior, &trace).unwrap();
        assert!(bundle.posterior.bit_equal(&post) && bundle.partition.bit_equal(&part));
        assert!(!bundle.prior.bit_equal(&prior));
    }

    #[test]
    fn step_losses_come_from_the_step_start_model() {
        let (train, _, _) = blobs(4);
        let cfg = small_cfg(Method::GFlowOut);
        let mut state = state_for(&cfg, &train);
        let batch = train.batch(&(0..12).collect::<Vec<_>>());
        let mut replay = state.clone();
        let metrics = train_step(&mut state, &batch, None).unwrap();

        let model = &mut replay.model;
        let bundle = model.policy.as_mut().unwrap();
        let (_, trace) = bundle
            .sample_trajectory(
                &model.backbone,
                &batch.x,
                Some(&batch.y),
                SampleMode::TemperedTrain,
                &mut replay.rng,
            )
            .unwrap();
        let ll = trace.log_likelihoods(&batch.y).unwrap();
        let lp = bundle.log_prob_from_trace(&trace, None, PolicyKind::Prior).unwrap();
        let log_r = combine_reward(1.0, &ll, &[], &lp);
        let obj = backbone_objective(&model.backbone, &trace, &batch.y, batch.dataset_size).unwrap();
        replay.opt.backbone.descend(&mut model.backbone, &obj.grad).unwrap();
        let (loss, _) = update_policy(
            bundle,
            &mut replay.opt.policy,
            &trace,
            &batch.y,
            &log_r,
            Objective::TrajectoryBalance,
            0.0,
        )
        .unwrap();
        update_prior(bundle, &mut replay.opt.policy.prior, &trace).unwrap();

        assert_eq!(metrics.policy_loss, loss);
        assert_eq!(metrics.cross_entropy, obj.cross_entropy);
        assert!(state.model.bit_equal(&replay.model));
    }

    #[test]
    fn every_method_trains_one_epoch() {
        let (train, val, _) = blobs(5);
        for method in [
            Method::GFlowOut,
            Method::IdGFlowOut,
            Method::RandomDropout,
            Method::McDropout,
            Method::None,
        ] {
            let mut cfg = small_cfg(method);
            cfg.epochs = 1;
            let fit = fit(&cfg, &train, &val).unwrap();
            let row = fit.history[0];
            assert!(row.train_ce.is_finite() && row.val_ce.is_finite(), "{method}");
            assert_eq!(row.mean_tb_loss == 0.0, !method.learns_masks(), "{method}");
        }
        let mut cfg = small_cfg(Method::GFlowOut);
        cfg.objective = Objective::DetailedBalance;
        cfg.epochs = 1;
        assert!(fit(&cfg, &train, &val).unwrap().history[0].mean_tb_loss.is_finite());
    }

    #[test]
    fn validation_reward_needs_validation_data() {
        let (train, val, _) = blobs(6);
        let mut cfg = small_cfg(Method::GFlowOut);
        cfg.reward.source = RewardSource::Validation;
        let mut state = state_for(&cfg, &train);
        assert!(matches!(run_epoch(&mut state, &train, None), Err(Error::Config(_))));
        run_epoch(&mut state, &train, Some(&val)).unwrap();
    }

    #[test]
    fn reruns_are_identical() {
        let (train, val, _) = blobs(7);
        let cfg = small_cfg(Method::GFlowOut);
        let a = fit(&cfg, &train, &val).unwrap();
        let b = fit(&cfg, &train, &val).unwrap();
        assert_eq!(a.history, b.history);
        assert!(a.best.bit_equal(&b.best));
        let other = fit(&TrainRunConfig { seed: 1, ..cfg }, &train, &val).unwrap();
        assert_ne!(a.history, other.history);
    }

    #[test]
    fn patience_zero_stops_after_first_non_improvement() {
        let (train, val, _) = blobs(8);
        let mut cfg = small_cfg(Method::None);
        cfg.patience = 0;
        cfg.epochs = 40;
        let fit = fit(&cfg, &train, &val).unwrap();
        let better =
            |a: &HistoryRow, b: &HistoryRow| a.val_acc > b.val_acc || (a.val_acc == b.val_acc && a.val_ce < b.val_ce);
        let h = &fit.history;
        for i in 1..h.len() - 1 {
            assert!(
                better(&h[i], &h[i - 1]),
                "epoch {} did not improve yet training continued",
                h[i].epoch
            );
        }
        if h.len() < 40 {
            assert!(!better(&h[h.len() - 1], &h[h.len() - 2]));
            assert_eq!(fit.best_epoch, h.len() - 1);
        }
    }

    #[test]
    fn plain_network_learns_blobs() {
        let (train, val, test) = blobs(9);
        let cfg = TrainRunConfig {
            method: Method::None,
            epochs: 50,
            patience: 50,
            ..TrainRunConfig::default()
        };
        let fit = fit(&cfg, &train, &val).unwrap();
        let (acc, _) = fit.best.evaluate(&test, 1, &mut SeededRng::new(0)).unwrap();
        assert!(acc >= 0.95, "{acc}");
    }

    #[test]
    fn non_finite_input_aborts_with_numeric_error() {
        let (train, _, _) = blobs(10);
        let mut cfg = small_cfg(Method::GFlowOut);
        cfg.lr.backbone = 0.0;
        let mut state = state_for(&cfg, &train);
        let mut batch = train.batch(&[0, 1, 2]);
        batch.x.set(1, 0, f64::NAN);
        let before = state.model.clone();
        match train_step(&mut state, &batch, None) {
            Err(Error::Numeric { .. }) => {}
            other => panic!("expected a numeric error, got {other:?}"),
        }
        assert!(state.model.bit_equal(&before));
    }

    #[test]
    fn adaptation_rejects_overlap_and_runs_nested_subsets() {
        let (train, val, test) = blobs(11);
        let mut cfg = small_cfg(Method::None);
        cfg.epochs = 2;
        let half = train.len() / 2;
        let noisy = train.subset(&(0..half).collect::<Vec<_>>());
        let clean = train.subset(&(half..train.len()).collect::<Vec<_>>());
        assert!(matches!(
            adaptation_protocol(&cfg, &noisy, &val, &noisy, &[1], 1, &test),
            Err(Error::Config(_))
        ));
        assert!(adaptation_protocol(&cfg, &noisy, &val, &clean, &[clean.len() + 1], 1, &test).is_err());
        let rows = adaptation_protocol(&cfg, &noisy, &val, &clean, &[0, 10, 40], 2, &test).unwrap();
        assert_eq!(rows.iter().map(|r| r.subset_size).collect::<Vec<_>>(), vec![0, 10, 40]);
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
    }
}
