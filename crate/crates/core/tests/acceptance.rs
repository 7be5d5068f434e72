//! Acceptance run: one pass/fail line per criterion, nonzero exit on failure.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use gflowout::backbone::BackboneNet;
use gflowout::checkpoint::{model_checkpoint, restore_model, Checkpoint};
use gflowout::data::{parse_idx, write_idx_images, write_idx_labels, Deformation, IdxData};
use gflowout::experiments::{experiment_config, median, moons, run_ood, run_robustness, OodFixture, DS};
use gflowout::inference::{predictive, stochastic_pass, MaskSource};
use gflowout::metrics::{aupr, auroc, tv_distance, ScoredLabels};
use gflowout::numeric::{DenseMatrix, SeededRng};
use gflowout::objectives::{tb_loss, RewardConfig, TbTerms};
use gflowout::oracle::{
    enumerable_fixture, exact_target, fit_fixture, gradcheck_paths, policy_terminal_distribution,
    random_gradcheck_instance, solve_balance, GradReport, MaskSpace,
};
use gflowout::params::Parameters;
use gflowout::policy::{PolicyBundle, PolicyKind, SampleMode};
use gflowout::report::history_csv;
use gflowout::trainer::{
    fit, update_backbone, update_id_policy, update_policy, update_prior, Method, Objective, TrainRunConfig, TrainState,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

/// Trained enumerable fixture matches the exact target.
fn proportional_sampling() -> Outcome {
    let start = Instant::now();
    let fixture = enumerable_fixture(0).unwrap();
    let fitted = fit_fixture(&fixture, &TrainRunConfig::default(), 5000).unwrap();
    let elapsed = start.elapsed();
    let tv = fitted.report.mean_tv();
    let rel = fitted.report.mean_log_z_rel_err();
    outcome(
        tv < 0.05 && rel < 0.05 && elapsed < Duration::from_secs(120),
        format!(
            "mean TV {tv:.4} (< 0.05), logZ rel err {rel:.4} (< 0.05), 5000 steps in {:.1}s (< 120s)",
            secs(elapsed)
        ),
    )
}

/// Analytic gradients of all three paths against central differences.
fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut reports = Vec::new();
    for seed in 0..20u64 {
        let (net, bundle, x, y) = random_gradcheck_instance(seed).unwrap();
        let mut rng = SeededRng::new(seed);
        for r in gradcheck_paths(&net, &bundle, &x, &y, &RewardConfig::default(), 1e-5, &mut rng).unwrap() {
            reports.push((seed, r));
        }
    }
    let elapsed = start.elapsed();
    let failing: Vec<&(u64, GradReport)> = reports.iter().filter(|(_, r)| !r.passes(1e-4)).collect();
    let (seed, worst) = reports
        .iter()
        .max_by(|a, b| a.1.max_rel_err.total_cmp(&b.1.max_rel_err))
        .unwrap();
    outcome(
        failing.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "worst rel err {:.2e} (< 1e-4) at instance {seed} {} (analytic {:.4e}, numeric {:.4e}); \
             {} of {} path checks over threshold; {:.1}s (< 60s)",
            worst.max_rel_err,
            worst.worst,
            worst.analytic,
            worst.numeric,
            failing.len(),
            reports.len(),
            secs(elapsed)
        ),
    )
}

/// Constructively solved balance is exact on every trajectory.
fn tb_optimum() -> Outcome {
    let mut rng = SeededRng::new(12);
    let mut worst_loss = 0.0f64;
    let mut worst_tv = 0.0f64;
    let shapes = [
        vec![2, 1, 2],
        vec![3, 1, 1, 2],
        vec![2, 1, 1, 1, 3],
        vec![2, 1, 1, 1, 1, 3],
    ];
    for dims in &shapes {
        let net = BackboneNet::new(dims, &mut rng).unwrap();
        let mut bundle = PolicyBundle::new(&net, 2.0, 0.1, &mut rng);
        let x = DenseMatrix::from_vec(1, dims[0], (0..dims[0]).map(|_| rng.normal()).collect()).unwrap();
        let y = 1;
        let target = exact_target(&net, &bundle, &x, y, &RewardConfig::default()).unwrap();
        solve_balance(&mut bundle, &net, &target).unwrap();
        let pol = policy_terminal_distribution(&bundle, &net, &x, Some(y), PolicyKind::Posterior).unwrap();
        worst_tv = worst_tv.max(tv_distance(&pol, &target.probs).unwrap());
        let space = MaskSpace::new(&net.maskable_dims()).unwrap();
        let xs = x.select_rows(&vec![0; space.size()]);
        let trace = net.forward(&xs, &space.all_masks()).unwrap();
        let ys = vec![y; space.size()];
        let terms = TbTerms {
            log_z: bundle.log_partition(&trace.input, &ys).unwrap(),
            log_q: bundle
                .log_prob_from_trace(&trace, Some(&ys), PolicyKind::Posterior)
                .unwrap(),
            log_r: target.log_r.clone(),
        };
        worst_loss = tb_loss(&terms).unwrap().into_iter().fold(worst_loss, f64::max);
    }
    outcome(
        worst_loss < 1e-12 && worst_tv < 1e-9,
        format!("M = 1..4: max TB loss {worst_loss:.2e} (< 1e-12), max TV {worst_tv:.2e} (< 1e-9)"),
    )
}

/// Policy updates never touch the backbone and backbone updates never touch the policy.
fn gradient_isolation() -> Outcome {
    let data = moons(2, 200, 0.1).load().unwrap();
    let mut failures = Vec::new();
    for method in [Method::GFlowOut, Method::IdGFlowOut] {
        let cfg = TrainRunConfig {
            method,
            hidden: vec![6, 5],
            ..TrainRunConfig::default()
        };
        let mut state = TrainState::new(cfg, &[2, 6, 5, 2]).unwrap();
        let batch = data.batch(&(0..16).collect::<Vec<_>>());
        let log_r = vec![-1.5; 16];
        for _ in 0..3 {
            let model = &mut state.model;
            if let Some(bundle) = model.policy.as_mut() {
                let (_, trace) = bundle
                    .sample_trajectory(
                        &model.backbone,
                        &batch.x,
                        Some(&batch.y),
                        SampleMode::TemperedTrain,
                        &mut state.rng,
                    )
                    .unwrap();
                let theta = model.backbone.clone();
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
                update_prior(bundle, &mut state.opt.policy.prior, &trace).unwrap();
                if !model.backbone.bit_equal(&theta) {
                    failures.push(format!("{}: policy step moved theta", method.name()));
                }
                let before = bundle.clone();
                update_backbone(&mut model.backbone, &mut state.opt.backbone, &trace, &batch.y).unwrap();
                if !bundle.bit_equal(&before) {
                    failures.push(format!("{}: backbone step moved phi/gamma/xi", method.name()));
                }
            } else {
                let policy = model.id_policy.as_mut().unwrap();
                let (traj, trace) = policy
                    .sample_trajectory(&model.backbone, &batch.x, SampleMode::TemperedTrain, &mut state.rng)
                    .unwrap();
                let theta = model.backbone.clone();
                update_id_policy(
                    policy,
                    &mut state.opt.id_logits,
                    &mut state.opt.id_log_z,
                    &traj.masks,
                    &log_r,
                )
                .unwrap();
                if !model.backbone.bit_equal(&theta) {
                    failures.push(format!("{}: policy step moved theta", method.name()));
                }
                let before = policy.clone();
                update_backbone(&mut model.backbone, &mut state.opt.backbone, &trace, &batch.y).unwrap();
                if !policy.bit_equal(&before) {
                    failures.push(format!("{}: backbone step moved the mask policy", method.name()));
                }
            }
        }
    }
    let detail = if failures.is_empty() {
        "GFlowOut and ID-GFlowOut, 3 alternating steps each: untouched groups bit-identical".to_string()
    } else {
        failures.join("; ")
    };
    outcome(failures.is_empty(), detail)
}

/// Without the likelihood term the target is the uniform prior.
fn beta_zero() -> Outcome {
    let mut rng = SeededRng::new(3);
    let cfg = RewardConfig {
        beta: 0.0,
        ..RewardConfig::default()
    };
    let mut worst = 0.0f64;
    for dims in [vec![3, 3, 2, 2], vec![4, 3, 3, 2], vec![2, 4, 4, 2, 3]] {
        let net = BackboneNet::new(&dims, &mut rng).unwrap();
        let bundle = PolicyBundle::new(&net, 1.0, 0.0, &mut rng);
        let x = DenseMatrix::from_vec(1, dims[0], (0..dims[0]).map(|_| 2.0 * rng.normal()).collect()).unwrap();
        let t = exact_target(&net, &bundle, &x, 1, &cfg).unwrap();
        let uniform = vec![1.0 / t.probs.len() as f64; t.probs.len()];
        worst = worst.max(tv_distance(&t.probs, &uniform).unwrap());
    }
    outcome(
        worst < 1e-10,
        format!("M = 5, 6, 10: max TV to uniform {worst:.2e} (< 1e-10)"),
    )
}

/// Predictive mean is the uniform mixture of the sampled passes.
fn inference_mixture() -> Outcome {
    let mut rng = SeededRng::new(21);
    let net = BackboneNet::new(&[3, 5, 4, 3], &mut rng).unwrap();
    let bundle = PolicyBundle::new(&net, 2.0, 0.1, &mut rng);
    let x = DenseMatrix::from_vec(6, 3, (0..18).map(|_| rng.normal()).collect()).unwrap();
    let (mut mean_err, mut sum_err) = (0.0f64, 0.0f64);
    for source in [MaskSource::Prior(&bundle), MaskSource::Bernoulli { keep: 0.5 }] {
        let r = predictive(&net, source, &x, 20, &mut SeededRng::new(4)).unwrap();
        for i in 0..x.rows() {
            for k in 0..3 {
                let mean = r.per_pass_probs.iter().map(|p| p.get(i, k)).sum::<f64>() / r.samples() as f64;
                mean_err = mean_err.max((r.mean_probs.get(i, k) - mean).abs());
            }
            sum_err = sum_err.max((r.mean_probs.row(i).iter().sum::<f64>() - 1.0).abs());
        }
    }
    let one = predictive(&net, MaskSource::Prior(&bundle), &x, 1, &mut SeededRng::new(3)).unwrap();
    let (_, probs) = stochastic_pass(&net, MaskSource::Prior(&bundle), &x, &mut SeededRng::new(3)).unwrap();
    let exact = one
        .mean_probs
        .as_slice()
        .iter()
        .zip(probs.as_slice())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    outcome(
        mean_err < 1e-10 && sum_err < 1e-10 && exact,
        format!("M = 20: mean error {mean_err:.2e}, row-sum error {sum_err:.2e} (< 1e-10); M = 1 bit-exact: {exact}"),
    )
}

/// Blobs against shifted blobs, GFlowOut against random dropout.
fn ood_direction() -> Outcome {
    let start = Instant::now();
    let run = |method| -> Vec<f64> {
        (0..5u64)
            .map(|seed| {
                run_ood(&OodFixture::new(seed), &experiment_config(method, seed), 20, DS)
                    .unwrap()
                    .auroc
            })
            .collect()
    };
    let gfo = run(Method::GFlowOut);
    let rd = run(Method::RandomDropout);
    let elapsed = start.elapsed();
    let above = gfo.iter().filter(|&&a| a > 0.7).count();
    let (mg, mr) = (median(&gfo), median(&rd));
    outcome(
        above >= 4 && mg >= mr && elapsed < Duration::from_secs(600),
        format!(
            "GFlowOut AUROC {gfo:.3?} ({above}/5 > 0.7), median {mg:.3} vs random dropout {mr:.3} ({rd:.3?}); {:.0}s (< 600s)",
            secs(elapsed)
        ),
    )
}

/// Two moons under Gaussian input noise, GFlowOut against random dropout.
fn robustness_direction() -> Outcome {
    let start = Instant::now();
    let run = |method| -> (Vec<f64>, Vec<f64>) {
        (0..5u64)
            .map(|seed| {
                let noise = [Deformation::gaussian_noise(0.3, seed + 500)];
                let r = run_robustness(&moons(seed, 1000, 0.1), &noise, &experiment_config(method, seed), 20).unwrap();
                (r.clean_accuracy, r.deformed_accuracy)
            })
            .unzip()
    };
    let (gc, gd) = run(Method::GFlowOut);
    let (rc, rd) = run(Method::RandomDropout);
    let elapsed = start.elapsed();
    let (mgd, mrd, mgc, mrc) = (median(&gd), median(&rd), median(&gc), median(&rc));
    outcome(
        mgd >= mrd && (mgc - mrc).abs() <= 0.02 && elapsed < Duration::from_secs(600),
        format!(
            "median deformed acc GFlowOut {mgd:.3} vs random dropout {mrd:.3}; clean {mgc:.3} vs {mrc:.3} (within 0.02); {:.0}s (< 600s)",
            secs(elapsed)
        ),
    )
}

/// Pairwise-count AUROC and threshold-sweep AUPR written out from scratch.
fn exhaustive_metrics(s: &ScoredLabels) -> (f64, f64) {
    let (mut num, mut den) = (0u64, 0u64);
    for (i, &si) in s.scores.iter().enumerate() {
        for (j, &sj) in s.scores.iter().enumerate() {
            if s.labels[i] && !s.labels[j] {
                den += 2;
                num += if si > sj { 2 } else { u64::from(si == sj) };
            }
        }
    }
    let mut thresholds = s.scores.clone();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let total = s.labels.iter().filter(|&&l| l).count() as f64;
    let (mut area, mut prev) = (0.0, 0.0);
    for t in thresholds {
        let sel: Vec<bool> = s
            .scores
            .iter()
            .zip(&s.labels)
            .filter(|(&v, _)| v >= t)
            .map(|(_, &l)| l)
            .collect();
        let tp = sel.iter().filter(|&&l| l).count() as f64;
        let recall = tp / total;
        area += (recall - prev) * (tp / sel.len() as f64);
        prev = recall;
    }
    (num as f64 / den as f64, area)
}

fn metric_oracles() -> Outcome {
    let mut rng = SeededRng::new(99);
    let mut mismatches = 0;
    let mut complement_breaks = 0;
    for _ in 0..50 {
        let n = 2 + rng.below(11);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.below(2) == 1).collect();
        labels[0] = true;
        labels[1] = false;
        // few distinct levels force ties
        let scores: Vec<f64> = (0..n).map(|_| rng.below(5) as f64 * 0.25).collect();
        let s = ScoredLabels::new(scores, labels).unwrap();
        let (a, p) = exhaustive_metrics(&s);
        if auroc(&s).unwrap() != a || aupr(&s).unwrap() != p {
            mismatches += 1;
        }
        if auroc(&s).unwrap() + auroc(&s.complement()).unwrap() != 1.0 {
            complement_breaks += 1;
        }
    }
    outcome(
        mismatches == 0 && complement_breaks == 0,
        format!(
            "50 random sets: {mismatches} mismatches, {complement_breaks} complement-identity breaks (exact equality)"
        ),
    )
}

fn reproducibility() -> Outcome {
    let mut problems = Vec::new();
    let config_text = "dataset = moons:n=200,seed=4\nmethod = gflowout\nepochs = 3\nlayers = 8,8\nseed = 4\n";
    let file = gflowout::config::RunConfigFile::parse(config_text).unwrap();
    let (train, val, _) = file.dataset.load_split().unwrap();
    let a = fit(&file.train, &train, &val).unwrap();
    let b = fit(&file.train, &train, &val).unwrap();
    if history_csv(&a.history) != history_csv(&b.history) {
        problems.push("history.csv differs between reruns");
    }
    let bytes = model_checkpoint(config_text, &a.best).to_bytes();
    match Checkpoint::from_bytes(&bytes).and_then(|ck| restore_model(&ck)) {
        Ok((_, model)) if model.bit_equal(&a.best) => {}
        _ => problems.push("checkpoint round trip not bit-exact"),
    }
    let mut corrupt = bytes.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 1;
    if Checkpoint::from_bytes(&corrupt).is_ok() {
        problems.push("corrupted checkpoint accepted");
    }
    let mut labels = vec![0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x0A];
    labels.extend(0..10u8);
    if parse_idx(&labels).ok() != Some(IdxData::Labels((0..10).collect())) {
        problems.push("label header fixture");
    }
    let images = [
        0x00, 0x00, 0x08, 0x03, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0xFF, 0x00, 0x00, 0xFF,
    ];
    match parse_idx(&images) {
        Ok(IdxData::Images {
            rows: 2,
            cols: 2,
            pixels,
        }) if pixels.as_slice() == [1.0, 0.0, 0.0, 1.0] => {}
        _ => problems.push("image header fixture"),
    }
    let pixels: Vec<u8> = (0..3 * 4 * 5).map(|v| (v * 37 % 256) as u8).collect();
    let round = match parse_idx(&write_idx_images(3, 4, 5, &pixels)) {
        Ok(IdxData::Images { pixels: m, .. }) => m.as_slice().iter().map(|v| (v * 255.0).round() as u8).collect(),
        _ => Vec::new(),
    };
    if round != pixels || parse_idx(&write_idx_labels(&[3, 1, 4])).ok() != Some(IdxData::Labels(vec![3, 1, 4])) {
        problems.push("IDX write/read round trip");
    }
    let detail = if problems.is_empty() {
        format!(
            "checkpoint ({} bytes) restores bit-exactly and a flipped bit fails CRC; {} history rows byte-identical; IDX fixtures and round trip ok",
            bytes.len(),
            a.history.len()
        )
    } else {
        problems.join("; ")
    };
    outcome(problems.is_empty(), detail)
}

fn main() -> ExitCode {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        ("proportional sampling", proportional_sampling),
        ("gradient correctness", gradient_correctness),
        ("TB optimum", tb_optimum),
        ("gradient isolation", gradient_isolation),
        ("beta=0 degeneracy", beta_zero),
        ("inference mixture", inference_mixture),
        ("OOD direction", ood_direction),
        ("robustness direction", robustness_direction),
        ("metric oracles", metric_oracles),
        ("reproducibility", reproducibility),
    ];
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|n| n != i + 1) {
            continue;
        }
        let o = run();
        failed += usize::from(!o.pass);
        println!(
            "criterion {} {name}: {} ({})",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
