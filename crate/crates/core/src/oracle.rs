//! Exact reference machinery for small mask spaces.
//!
//! Masks are enumerated by binary counting over the concatenated units of all
//! maskable layers (layer 0 first). Unit `j` of the concatenation is bit
//! `M − 1 − j` of the index, so index 0 is the all-zeros mask and index
//! `2^M − 1` keeps every unit.

use crate::backbone::{BackboneNet, ForwardTrace};
use crate::error::{arg_err, Error, Result};
use crate::metrics::tv_distance;
use crate::numeric::{log_sum_exp, logit, DenseMatrix, SeededRng};
use crate::objectives::{reward_log, RewardConfig, TbTerms};
use crate::params::Parameters;
use crate::perceptron::{Dense, Perceptron};
use crate::policy::{GeneratorStack, PolicyBundle, PolicyKind, SampleMode, GENERATOR_HIDDEN};
use crate::trainer::{tb_gradient, update_policy, Objective, PolicyOptimizers};

/// Largest mask space that may be enumerated.
pub const ENUMERATION_CAP: usize = 20;

/// Largest mask space compared against a trained policy.
pub const TV_CAP: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpace {
    dims: Vec<usize>,
    units: usize,
}

impl MaskSpace {
    pub fn new(dims: &[usize]) -> Result<Self> {
        Self::with_cap(dims, ENUMERATION_CAP)
    }

    pub fn with_cap(dims: &[usize], cap: usize) -> Result<Self> {
        let units: usize = dims.iter().sum();
        if units > cap {
            return Err(Error::Guard(format!(
                "{units} maskable units exceed the enumeration cap {cap}"
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            units,
        })
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn size(&self) -> usize {
        1 << self.units
    }

    /// Concatenated unit values of mask `index`.
    pub fn bits(&self, index: usize) -> Vec<f64> {
        (0..self.units)
            .map(|j| ((index >> (self.units - 1 - j)) & 1) as f64)
            .collect()
    }

    /// Index of the concatenated unit values.
    pub fn index_of(&self, bits: &[f64]) -> usize {
        bits.iter().fold(0, |acc, &b| (acc << 1) | usize::from(b != 0.0))
    }

    /// Index of row `row` of per-layer masks.
    pub fn index_of_row(&self, masks: &[DenseMatrix], row: usize) -> usize {
        let bits: Vec<f64> = masks.iter().flat_map(|m| m.row(row).iter().copied()).collect();
        self.index_of(&bits)
    }

    /// Every mask at once: one `(2^M, d_l)` matrix per layer, row `k` = mask `k`.
    pub fn all_masks(&self) -> Vec<DenseMatrix> {
        let n = self.size();
        let mut out: Vec<DenseMatrix> = self.dims.iter().map(|&d| DenseMatrix::zeros(n, d)).collect();
        for k in 0..n {
            let bits = self.bits(k);
            let mut j = 0;
            for m in out.iter_mut() {
                for u in 0..m.cols() {
                    m.set(k, u, bits[j]);
                    j += 1;
                }
            }
        }
        out
    }
}

fn repeat_row(x: &DenseMatrix, n: usize) -> Result<DenseMatrix> {
    if x.rows() != 1 {
        return arg_err(format!("expected a single input row, got {}", x.rows()));
    }
    DenseMatrix::from_vec(n, x.cols(), x.row(0).repeat(n))
}

/// Exact target `π(z) ∝ R(z)` over every mask, and `log Σ_z R(z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactTarget {
    pub probs: Vec<f64>,
    pub log_r: Vec<f64>,
    pub log_sum_r: f64,
}

pub fn target_from_log_rewards(log_r: Vec<f64>) -> Result<ExactTarget> {
    let log_sum_r = log_sum_exp(&log_r)?;
    Ok(ExactTarget {
        probs: log_r.iter().map(|r| (r - log_sum_r).exp()).collect(),
        log_r,
        log_sum_r,
    })
}

/// Rewards of every mask for the single input `x` with label `y`.
pub fn exact_target(
    backbone: &BackboneNet,
    prior: &PolicyBundle,
    x: &DenseMatrix,
    y: usize,
    cfg: &RewardConfig,
) -> Result<ExactTarget> {
    let space = MaskSpace::new(&backbone.maskable_dims())?;
    let n = space.size();
    let xs = repeat_row(x, n)?;
    let log_r = reward_log(backbone, prior, &xs, &vec![y; n], &space.all_masks(), cfg, &[])?;
    target_from_log_rewards(log_r)
}

/// Trace of the backbone under every mask for input `x`.
fn enumerated_trace(backbone: &BackboneNet, x: &DenseMatrix, cap: usize) -> Result<(MaskSpace, ForwardTrace)> {
    let space = MaskSpace::with_cap(&backbone.maskable_dims(), cap)?;
    let xs = repeat_row(x, space.size())?;
    let trace = backbone.forward(&xs, &space.all_masks())?;
    Ok((space, trace))
}

/// Exact terminal distribution of a policy, by chaining its conditionals.
pub fn policy_terminal_distribution(
    bundle: &PolicyBundle,
    backbone: &BackboneNet,
    x: &DenseMatrix,
    y: Option<usize>,
    kind: PolicyKind,
) -> Result<Vec<f64>> {
    let (space, trace) = enumerated_trace(backbone, x, ENUMERATION_CAP)?;
    let labels = y.map(|y| vec![y; space.size()]);
    let lp = bundle.log_prob_from_trace(&trace, labels.as_deref(), kind)?;
    Ok(lp.into_iter().map(f64::exp).collect())
}

/// Histogram of `n` sampled trajectories over the enumeration order.
pub fn empirical_distribution(
    bundle: &PolicyBundle,
    backbone: &BackboneNet,
    x: &DenseMatrix,
    y: Option<usize>,
    mode: SampleMode,
    n: usize,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    let space = MaskSpace::new(&backbone.maskable_dims())?;
    let xs = repeat_row(x, n)?;
    let labels = y.map(|y| vec![y; n]);
    let (traj, _) = bundle.sample_trajectory(backbone, &xs, labels.as_deref(), mode, rng)?;
    let mut hist = vec![0.0; space.size()];
    for i in 0..n {
        hist[space.index_of_row(&traj.masks, i)] += 1.0;
    }
    hist.iter_mut().for_each(|h| *h /= n as f64);
    Ok(hist)
}

/// TV distance between the posterior's terminal distribution and the target.
pub fn tv_to_target(
    bundle: &PolicyBundle,
    backbone: &BackboneNet,
    x: &DenseMatrix,
    y: usize,
    cfg: &RewardConfig,
) -> Result<f64> {
    MaskSpace::with_cap(&backbone.maskable_dims(), TV_CAP)?;
    let target = exact_target(backbone, bundle, x, y, cfg)?;
    let policy = policy_terminal_distribution(bundle, backbone, x, Some(y), PolicyKind::Posterior)?;
    tv_distance(&policy, &target.probs)
}

/// Worst entry of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// `name[flat index]` of the worst scalar.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    fn merge(self, other: GradReport) -> GradReport {
        let checked = self.checked + other.checked;
        let mut worse = if other.max_rel_err > self.max_rel_err {
            other
        } else {
            self
        };
        worse.checked = checked;
        worse
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` with central differences of `loss` around `params`.
///
/// `loss` must be a deterministic function of the parameters; it is
/// evaluated twice at the base point and a mismatch is a contract error.
pub fn finite_diff_gradcheck<P, F>(params: &P, analytic: &P, mut loss: F, h: f64) -> Result<GradReport>
where
    P: Parameters + Clone,
    F: FnMut(&P) -> Result<f64>,
{
    let a = loss(params)?;
    let b = loss(params)?;
    if a.to_bits() != b.to_bits() {
        return Err(Error::Contract(format!(
            "loss is not deterministic under a frozen seed ({a} vs {b})"
        )));
    }
    let mut names = Vec::new();
    params.visit("", &mut |name, _, d| names.push((name.to_string(), d.len())));
    let grads = analytic.flatten();
    if grads.len() != names.len() {
        return arg_err("analytic gradient layout differs from the parameters");
    }
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let base = params.flatten();
    let mut probe = params.clone();
    for (t, (name, len)) in names.iter().enumerate() {
        for j in 0..*len {
            let orig = base[t][j];
            set_scalar(&mut probe, t, j, orig + h);
            let up = loss(&probe)?;
            set_scalar(&mut probe, t, j, orig - h);
            let down = loss(&probe)?;
            set_scalar(&mut probe, t, j, orig);
            let numeric = (up - down) / (2.0 * h);
            let g = grads[t][j];
            let err = relative_error(g, numeric);
            report.checked += 1;
            if report.worst.is_empty() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!("{name}[{j}]");
                report.analytic = g;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn set_scalar<P: Parameters>(p: &mut P, tensor: usize, index: usize, value: f64) {
    let mut k = 0;
    p.visit_mut("", &mut |_, _, d| {
        if k == tensor {
            d[index] = value;
        }
        k += 1;
    });
}

/// Gradient check of the backbone's masked cross-entropy.
pub fn gradcheck_backbone(
    backbone: &BackboneNet,
    x: &DenseMatrix,
    labels: &[usize],
    masks: &[DenseMatrix],
    h: f64,
) -> Result<GradReport> {
    let trace = backbone.forward(x, masks)?;
    let analytic = backbone.backward(&trace, labels)?;
    finite_diff_gradcheck(
        backbone,
        &analytic,
        |b| crate::backbone::cross_entropy(&b.forward(x, masks)?, labels),
        h,
    )
    .map(|r| r.with_prefix("theta"))
}

/// Gradient check of the prior objective on frozen masks.
pub fn gradcheck_prior(bundle: &PolicyBundle, trace: &ForwardTrace, h: f64) -> Result<GradReport> {
    let obj = crate::objectives::prior_objective(bundle, trace)?;
    let mut probe = bundle.clone();
    finite_diff_gradcheck(
        &bundle.prior,
        &obj.grad,
        |p: &GeneratorStack| {
            probe.prior = p.clone();
            Ok(crate::objectives::prior_objective(&probe, trace)?.value)
        },
        h,
    )
    .map(|r| r.with_prefix("xi"))
}

/// Gradient check of the trajectory-balance loss w.r.t. the posterior and
/// partition networks on a frozen trajectory.
pub fn gradcheck_tb(
    bundle: &PolicyBundle,
    trace: &ForwardTrace,
    labels: &[usize],
    log_r: &[f64],
    h: f64,
) -> Result<GradReport> {
    let g = tb_gradient(bundle, trace, labels, log_r)?;
    let params = (bundle.posterior.clone(), bundle.partition.clone());
    let analytic = (g.posterior, g.partition);
    let mut probe = bundle.clone();
    finite_diff_gradcheck(
        &params,
        &analytic,
        |p: &(GeneratorStack, Perceptron)| {
            probe.posterior = p.0.clone();
            probe.partition = p.1.clone();
            Ok(tb_gradient(&probe, trace, labels, log_r)?.loss)
        },
        h,
    )
    .map(|r| r.with_prefix("phi_gamma"))
}

/// Gradient checks of all three groups: the backbone on masked
/// cross-entropy, the prior objective, and trajectory balance, all on one
/// trajectory sampled from the training policy.
pub fn gradcheck_paths(
    backbone: &BackboneNet,
    bundle: &PolicyBundle,
    x: &DenseMatrix,
    labels: &[usize],
    reward: &RewardConfig,
    h: f64,
    rng: &mut SeededRng,
) -> Result<Vec<GradReport>> {
    let (_, trace) = bundle.sample_trajectory(backbone, x, Some(labels), SampleMode::TemperedTrain, rng)?;
    let log_r = reward_log(backbone, bundle, x, labels, &trace.masks, reward, &[])?;
    Ok(vec![
        gradcheck_backbone(backbone, x, labels, &trace.masks, h)?,
        gradcheck_prior(bundle, &trace, h)?,
        gradcheck_tb(bundle, &trace, labels, &log_r, h)?,
    ])
}

/// Adds `N(0, scale²)` noise to every policy parameter, so that no gradient
/// vanishes because an output layer starts at zero.
pub fn perturb_policy(bundle: &mut PolicyBundle, scale: f64, rng: &mut SeededRng) {
    bundle.visit_mut("", &mut |_, _, d| d.iter_mut().for_each(|w| *w += scale * rng.normal()));
}

/// Adds `N(0, scale²)` noise to every backbone bias. With zero biases, a
/// layer fed by a fully dropped layer sits exactly on the ReLU kink, where
/// finite differences see half the slope.
pub fn jitter_biases(backbone: &mut BackboneNet, scale: f64, rng: &mut SeededRng) {
    for layer in &mut backbone.layers {
        layer.bias.iter_mut().for_each(|b| *b += scale * rng.normal());
    }
}

/// A random small network, perturbed policy, batch and labels.
pub fn random_gradcheck_instance(seed: u64) -> Result<(BackboneNet, PolicyBundle, DenseMatrix, Vec<usize>)> {
    let mut rng = SeededRng::with_stream(seed, 13);
    let input = 2 + rng.below(3);
    let classes = 2 + rng.below(2);
    let mut dims = vec![input];
    for _ in 0..1 + rng.below(2) {
        dims.push(2 + rng.below(3));
    }
    dims.push(classes);
    let mut backbone = BackboneNet::new(&dims, &mut rng)?;
    jitter_biases(&mut backbone, 0.5, &mut rng);
    let mut bundle = PolicyBundle::new(&backbone, 2.0, 0.1, &mut rng);
    perturb_policy(&mut bundle, 0.3, &mut rng);
    let batch = 3;
    let x = DenseMatrix::from_vec(batch, input, (0..batch * input).map(|_| rng.normal()).collect())?;
    let labels = (0..batch).map(|_| rng.below(classes)).collect();
    Ok((backbone, bundle, x, labels))
}

impl GradReport {
    fn with_prefix(mut self, prefix: &str) -> Self {
        self.worst = format!("{prefix}.{}", self.worst);
        self
    }

    /// Combines reports, keeping the worst entry.
    pub fn combine(reports: Vec<GradReport>) -> Option<GradReport> {
        reports.into_iter().reduce(GradReport::merge)
    }
}

/// Sets `bundle`'s posterior so that each conditional equals the target's
/// conditional and its partition output to `log Σ R`, for one input.
///
/// Needs one unit per maskable layer: generators factorize within a layer,
/// so only then is every target representable. The generator of layer `l`
/// becomes a lookup table over the `2^l` histories of earlier masks, built
/// from indicator units `ReLU(Σ_j ±z_j + 1 − |s|)`.
pub fn solve_balance(bundle: &mut PolicyBundle, backbone: &BackboneNet, target: &ExactTarget) -> Result<()> {
    let dims = backbone.maskable_dims();
    if dims.iter().any(|&d| d != 1) {
        return arg_err("solved balance needs one unit per maskable layer");
    }
    let layers = dims.len();
    if (1usize << layers) > GENERATOR_HIDDEN {
        return arg_err(format!(
            "{layers} layers need more than {GENERATOR_HIDDEN} indicator units"
        ));
    }
    let probs = &target.probs;
    let k = bundle.num_classes();
    for l in 0..layers {
        let hist = 1usize << l;
        let net = &mut bundle.posterior.nets[l];
        let in_dim = net.in_dim();
        let mut first = Dense::zeros(in_dim, GENERATOR_HIDDEN);
        let mut second = Dense::zeros(GENERATOR_HIDDEN, GENERATOR_HIDDEN);
        let mut out = Dense::zeros(GENERATOR_HIDDEN, 1);
        for s in 0..hist {
            // marginal mass of histories s followed by z_l = 1 and by anything
            let prefix_mass = |keep: Option<usize>| -> f64 {
                probs
                    .iter()
                    .enumerate()
                    .filter(|(idx, _)| {
                        let head = idx >> (layers - l);
                        let bit = (idx >> (layers - 1 - l)) & 1;
                        head == s && keep.is_none_or(|b| bit == b)
                    })
                    .map(|(_, p)| p)
                    .sum()
            };
            let total = prefix_mass(None);
            let on = prefix_mass(Some(1));
            let p = if total > 0.0 { on / total } else { 0.5 };
            // features: [h′ (1) ‖ onehot(y) (k) ‖ z_1 .. z_l]
            let ones = (0..l).filter(|j| (s >> (l - 1 - j)) & 1 == 1).count();
            for j in 0..l {
                let bit = (s >> (l - 1 - j)) & 1;
                first.weights.set(s, 1 + k + j, if bit == 1 { 1.0 } else { -1.0 });
            }
            first.bias[s] = 1.0 - ones as f64;
            second.weights.set(s, s, 1.0);
            out.weights.set(0, s, logit(p));
        }
        net.layers = vec![first, second, out];
    }
    let part = &mut bundle.partition;
    for layer in &mut part.layers {
        layer.weights.as_mut_slice().iter_mut().for_each(|w| *w = 0.0);
        layer.bias.iter_mut().for_each(|b| *b = 0.0);
    }
    if let Some(last) = part.layers.last_mut() {
        last.bias[0] = target.log_sum_r;
    }
    Ok(())
}

/// A small network whose mask space can be enumerated, with probe inputs.
#[derive(Debug, Clone)]
pub struct EnumerableFixture {
    pub backbone: BackboneNet,
    pub probes: DenseMatrix,
    pub labels: Vec<usize>,
    pub reward: RewardConfig,
}

/// Backbone `4-3-3-2` (six maskable units) with eight probe inputs.
///
/// Weights keep their He initialization and inputs are drawn with standard
/// deviation 1.5, which moves the likelihood enough across masks for the
/// target to be far from uniform while keeping every probability well inside
/// the clamp range.
pub fn enumerable_fixture(seed: u64) -> Result<EnumerableFixture> {
    let mut rng = SeededRng::with_stream(seed, 7);
    let backbone = BackboneNet::new(&[4, 3, 3, 2], &mut rng)?;
    let probes = DenseMatrix::from_vec(8, 4, (0..32).map(|_| 1.5 * rng.normal()).collect())?;
    let labels = (0..8).map(|i| i % 2).collect();
    Ok(EnumerableFixture {
        backbone,
        probes,
        labels,
        reward: RewardConfig::default(),
    })
}

/// Per-probe agreement between a trained posterior and the exact target.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureReport {
    pub tv: Vec<f64>,
    /// `|log Z_learned − log Σ R| / |log Σ R|`.
    pub log_z_rel_err: Vec<f64>,
}

impl FixtureReport {
    pub fn mean_tv(&self) -> f64 {
        self.tv.iter().sum::<f64>() / self.tv.len() as f64
    }

    pub fn mean_log_z_rel_err(&self) -> f64 {
        self.log_z_rel_err.iter().sum::<f64>() / self.log_z_rel_err.len() as f64
    }
}

pub fn fixture_report(bundle: &PolicyBundle, fixture: &EnumerableFixture) -> Result<FixtureReport> {
    let mut tv = Vec::new();
    let mut rel = Vec::new();
    let learned = bundle.log_partition(&fixture.probes, &fixture.labels)?;
    for (i, &y) in fixture.labels.iter().enumerate() {
        let x = fixture.probes.select_rows(&[i]);
        tv.push(tv_to_target(bundle, &fixture.backbone, &x, y, &fixture.reward)?);
        let target = exact_target(&fixture.backbone, bundle, &x, y, &fixture.reward)?;
        rel.push((learned[i] - target.log_sum_r).abs() / target.log_sum_r.abs());
    }
    Ok(FixtureReport { tv, log_z_rel_err: rel })
}

/// Trains only the posterior and partition networks on the fixture's probes
/// with the backbone and prior frozen. Returns the mean TB loss of each step.
pub fn train_fixture_policy(
    bundle: &mut PolicyBundle,
    opt: &mut PolicyOptimizers,
    fixture: &EnumerableFixture,
    steps: usize,
    copies: usize,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    let n = fixture.labels.len() * copies;
    let rows: Vec<usize> = (0..n).map(|i| i % fixture.labels.len()).collect();
    let xs = fixture.probes.select_rows(&rows);
    let ys: Vec<usize> = rows.iter().map(|&i| fixture.labels[i]).collect();
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (_, trace) = bundle.sample_trajectory(&fixture.backbone, &xs, Some(&ys), SampleMode::TemperedTrain, rng)?;
        let log_r = fixture_log_r(bundle, fixture, &trace, &ys)?;
        let (loss, _) = update_policy(bundle, opt, &trace, &ys, &log_r, Objective::TrajectoryBalance, 0.0)?;
        losses.push(loss);
    }
    Ok(losses)
}

fn fixture_log_r(
    bundle: &PolicyBundle,
    fixture: &EnumerableFixture,
    trace: &ForwardTrace,
    ys: &[usize],
) -> Result<Vec<f64>> {
    let ll = trace.log_likelihoods(ys)?;
    let lp = bundle.log_prob_from_trace(trace, None, PolicyKind::Prior)?;
    Ok(crate::objectives::combine_reward(fixture.reward.beta, &ll, &[], &lp))
}

/// Outcome of [`fit_fixture`].
#[derive(Debug, Clone)]
pub struct FixtureFit {
    pub bundle: PolicyBundle,
    pub initial: FixtureReport,
    pub report: FixtureReport,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean sampled TB loss of every step.
    pub losses: Vec<f64>,
}

/// Trains a fresh posterior on the fixture for `steps` steps with eight copies
/// of each probe per batch. For the last two fifths of the run the posterior
/// learning rate drops tenfold and the partition rate to the policy rate.
pub fn fit_fixture(
    fixture: &EnumerableFixture,
    cfg: &crate::trainer::TrainRunConfig,
    steps: usize,
) -> Result<FixtureFit> {
    let mut rng = SeededRng::with_stream(cfg.seed, 11);
    let mut bundle = PolicyBundle::new(&fixture.backbone, cfg.temperature, cfg.epsilon, &mut rng);
    let initial = fixture_report(&bundle, fixture)?;
    let initial_loss = exhaustive_tb_loss(&bundle, fixture)?;
    let mut opt = crate::trainer::Optimizers::new(cfg).policy;
    let switch = steps * 3 / 5;
    let mut losses = train_fixture_policy(&mut bundle, &mut opt, fixture, switch, 8, &mut rng)?;
    opt.posterior.config.lr = cfg.lr.policy * 0.1;
    opt.partition.config.lr = cfg.lr.policy;
    losses.extend(train_fixture_policy(
        &mut bundle,
        &mut opt,
        fixture,
        steps - switch,
        8,
        &mut rng,
    )?);
    Ok(FixtureFit {
        report: fixture_report(&bundle, fixture)?,
        final_loss: exhaustive_tb_loss(&bundle, fixture)?,
        bundle,
        initial,
        initial_loss,
        losses,
    })
}

/// Mean TB loss of the posterior over every probe and every mask, weighting
/// masks uniformly.
pub fn exhaustive_tb_loss(bundle: &PolicyBundle, fixture: &EnumerableFixture) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &y) in fixture.labels.iter().enumerate() {
        let x = fixture.probes.select_rows(&[i]);
        let (space, trace) = enumerated_trace(&fixture.backbone, &x, ENUMERATION_CAP)?;
        let ys = vec![y; space.size()];
        let terms = TbTerms {
            log_z: bundle.log_partition(&trace.input, &ys)?,
            log_q: bundle.log_prob_from_trace(&trace, Some(&ys), PolicyKind::Posterior)?,
            log_r: fixture_log_r(bundle, fixture, &trace, &ys)?,
        };
        total += crate::objectives::tb_loss(&terms)?.iter().sum::<f64>();
        count += space.size();
    }
    Ok(total / count as f64)
}
