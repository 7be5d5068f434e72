//! `gflowout` command-line front end.
//!
//! Exit codes: 0 ok, 1 other failure, 2 configuration, 3 numeric abort,
//! 4 checkpoint, 5 enumeration guard, 6 gradient check.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use gflowout::backbone::{cross_entropy, BackboneNet};
use gflowout::checkpoint::{model_checkpoint, restore_model, Checkpoint};
use gflowout::config::{deform, parse_deformations, DatasetSpec, RunConfigFile};
use gflowout::data::Dataset;
use gflowout::error::Error;
use gflowout::inference::{ood_scores, DsMode, UncertaintyMetric};
use gflowout::metrics::{aupr, auroc};
use gflowout::numeric::{DenseMatrix, SeededRng};
use gflowout::objectives::{RewardConfig, RewardSource};
use gflowout::oracle::{
    enumerable_fixture, finite_diff_gradcheck, fit_fixture, fixture_report, gradcheck_paths, jitter_biases,
    perturb_policy, EnumerableFixture, GradReport, MaskSpace,
};
use gflowout::policy::PolicyBundle;
use gflowout::report::{history_csv, RunMetadata};
use gflowout::trainer::{fit, Model, TrainRunConfig};

const GRAD_TOLERANCE: f64 = 1e-4;
const ENUMCHECK_CAP: usize = 12;

#[derive(Parser)]
#[command(name = "gflowout", version, about = "GFlowNet-learned dropout for small classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file; writes checkpoint.gfo, history.csv and run.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds; each replica goes to `<out>/seed-<n>`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Clean and deformed accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset spec, e.g. `moons:n=1000,seed=3`.
        #[arg(long)]
        dataset: String,
        /// Deformation spec; repeat for a sweep, one row each.
        #[arg(long, default_value = "none")]
        deformation: Vec<String>,
        /// Comma-separated mask sample counts; defaults to the config's M_inference.
        #[arg(long, value_delimiter = ',')]
        samples: Vec<usize>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// AUROC and AUPR of uncertainty scores, in-distribution against OOD.
    Ood {
        #[arg(long)]
        checkpoint: PathBuf,
        /// In-distribution dataset spec; its test split is scored.
        #[arg(long = "in")]
        in_dist: String,
        /// OOD dataset spec; truncated to the size of the in-distribution test split.
        #[arg(long)]
        ood: String,
        #[arg(long, value_enum, default_value_t = MetricArg::Ds)]
        metric: MetricArg,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Total variation and log Z error of the posterior against the enumerated target.
    Enumcheck {
        /// Checkpoint of a GFlowOut model; needs `--probes`.
        #[arg(long, conflicts_with = "fixture")]
        checkpoint: Option<PathBuf>,
        /// Dataset spec whose first `--count` rows are the probe inputs.
        #[arg(long, requires = "checkpoint")]
        probes: Option<String>,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Seed of the built-in 4-3-3-2 fixture.
        #[arg(long)]
        fixture: Option<u64>,
        /// Training steps on the built-in fixture before checking.
        #[arg(long, default_value_t = 0)]
        steps: usize,
    },
    /// Finite-difference check of every gradient path of a fresh model.
    ///
    /// Backbone biases and policy parameters are jittered first: zero biases
    /// put units on a ReLU kink, and zero policy output layers make gradients
    /// vanish exactly, which leaves only roundoff on the numeric side.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        /// Corrupts one entry of the backbone gradient before checking.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    /// Dempster–Shafer on the mean logits.
    Ds,
    /// Dempster–Shafer averaged over passes.
    DsPerPass,
    Entropy,
}

impl From<MetricArg> for UncertaintyMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Ds => UncertaintyMetric::DempsterShafer(DsMode::MeanLogits),
            MetricArg::DsPerPass => UncertaintyMetric::DempsterShafer(DsMode::PerPass),
            MetricArg::Entropy => UncertaintyMetric::Entropy,
        }
    }
}

/// Error with its exit code.
struct Failure {
    code: u8,
    message: String,
}

type CmdResult = Result<(), Failure>;

fn code_of(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric { .. } => 3,
        Error::Checkpoint(_) => 4,
        Error::Guard(_) => 5,
        _ => 1,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: code_of(&e),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: 1,
            message: e.to_string(),
        }
    }
}

fn failure(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

fn load_config(path: &Path) -> Result<RunConfigFile, Failure> {
    let text = fs::read_to_string(path).map_err(|e| failure(2, format!("{}: {e}", path.display())))?;
    RunConfigFile::parse(&text).map_err(|e| failure(2, format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<(RunConfigFile, Model), Failure> {
    let ck = Checkpoint::load(path).map_err(|e| failure(4, format!("{}: {e}", path.display())))?;
    restore_model(&ck).map_err(|e| failure(4, format!("{}: {e}", path.display())))
}

fn dataset(spec: &str) -> Result<DatasetSpec, Failure> {
    spec.parse::<DatasetSpec>().map_err(|e| failure(2, e.to_string()))
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json values serialize"));
}

/// Config text with its `seed` line replaced.
fn with_seed(text: &str, seed: u64) -> String {
    let mut out: String = text
        .lines()
        .filter(|l| l.split_once('=').is_none_or(|(k, _)| k.trim() != "seed"))
        .map(|l| format!("{l}\n"))
        .collect();
    out.push_str(&format!("seed = {seed}\n"));
    out
}

/// Trains one run and writes its three files; returns a summary.
fn train_one(text: &str, out: &Path) -> Result<Value, Failure> {
    let cfg = RunConfigFile::parse(text).map_err(|e| failure(2, e.to_string()))?;
    let (train, val, _) = cfg.dataset.load_split()?;
    let result = fit(&cfg.train, &train, &val)?;
    fs::create_dir_all(out)?;
    model_checkpoint(text, &result.best).save(&out.join("checkpoint.gfo"))?;
    fs::write(out.join("history.csv"), history_csv(&result.history))?;
    let meta = RunMetadata::new(
        text,
        cfg.train.seed,
        cfg.train.method.name(),
        &result.history,
        result.best_epoch,
    );
    fs::write(out.join("run.json"), meta.to_json())?;
    Ok(json!({
        "out": out.display().to_string(),
        "seed": cfg.train.seed,
        "best_epoch": result.best_epoch,
        "epochs_run": result.history.len(),
        "best_val_acc": meta.best_val_acc,
    }))
}

fn cmd_train(config: &Path, out: &Path, seeds: &[u64]) -> CmdResult {
    let file = load_config(config)?;
    if seeds.is_empty() {
        print_json(&train_one(&file.text, out)?);
        return Ok(());
    }
    let results: Vec<Result<Value, Failure>> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let text = with_seed(&file.text, seed);
                let dir = out.join(format!("seed-{seed}"));
                s.spawn(move || train_one(&text, &dir))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    });
    let mut rows = Vec::new();
    for r in results {
        rows.push(r?);
    }
    print_json(&Value::Array(rows));
    Ok(())
}

fn cmd_eval(checkpoint: &Path, spec: &str, deformations: &[String], samples: &[usize], split: Split) -> CmdResult {
    let (cfg, model) = load_checkpoint(checkpoint)?;
    let spec = dataset(spec)?;
    let data: Dataset = match split {
        Split::Test => spec.load_split()?.2,
        Split::All => spec.load()?,
    };
    let samples = if samples.is_empty() {
        vec![cfg.train.inference_samples]
    } else {
        samples.to_vec()
    };
    let mut rows = Vec::new();
    for d in deformations {
        let defs = parse_deformations(d).map_err(|e| failure(2, e.to_string()))?;
        let deformed = deform(&data, &defs)?;
        for &m in &samples {
            // clean and deformed passes draw the same masks
            let (clean_acc, clean_ce) = model.evaluate(&data, m, &mut SeededRng::with_stream(cfg.train.seed, 5000))?;
            let (def_acc, def_ce) = model.evaluate(&deformed, m, &mut SeededRng::with_stream(cfg.train.seed, 5000))?;
            rows.push(json!({
                "deformation": d,
                "samples": m,
                "clean_accuracy": clean_acc,
                "deformed_accuracy": def_acc,
                "clean_mean_ce": clean_ce,
                "deformed_mean_ce": def_ce,
            }));
        }
    }
    print_json(&Value::Array(rows));
    Ok(())
}

fn cmd_ood(checkpoint: &Path, in_spec: &str, ood_spec: &str, metric: MetricArg, samples: Option<usize>) -> CmdResult {
    let (cfg, model) = load_checkpoint(checkpoint)?;
    let (_, _, test) = dataset(in_spec)?.load_split()?;
    let ood = dataset(ood_spec)?.load()?;
    let ood = ood.subset(&(0..test.len().min(ood.len())).collect::<Vec<_>>());
    let m = samples.unwrap_or(cfg.train.inference_samples);
    let mut rng = SeededRng::with_stream(cfg.train.seed, 3000);
    let scored = ood_scores(
        &model.backbone,
        model.inference_source()?,
        &test.x,
        &ood.x,
        m,
        metric.into(),
        &mut rng,
    )?;
    print_json(&json!({
        "metric": format!("{:?}", UncertaintyMetric::from(metric)),
        "samples": m,
        "in_count": test.len(),
        "ood_count": ood.len(),
        "auroc": auroc(&scored)?,
        "aupr": aupr(&scored)?,
    }));
    Ok(())
}

fn enumcheck_report(bundle: &PolicyBundle, fixture: &EnumerableFixture) -> CmdResult {
    let report = fixture_report(bundle, fixture)?;
    let probes: Vec<Value> = report
        .tv
        .iter()
        .zip(&report.log_z_rel_err)
        .enumerate()
        .map(|(i, (tv, rel))| json!({ "probe": i, "tv": tv, "log_z_rel_err": rel }))
        .collect();
    print_json(&json!({
        "units": fixture.backbone.num_maskable_units(),
        "mean_tv": report.mean_tv(),
        "mean_log_z_rel_err": report.mean_log_z_rel_err(),
        "probes": probes,
    }));
    Ok(())
}

fn cmd_enumcheck(
    checkpoint: Option<&Path>,
    probes: Option<&str>,
    count: usize,
    fixture_seed: Option<u64>,
    steps: usize,
) -> CmdResult {
    match (checkpoint, fixture_seed) {
        (Some(path), _) => {
            let (cfg, model) = load_checkpoint(path)?;
            MaskSpace::with_cap(&model.backbone.maskable_dims(), ENUMCHECK_CAP)?;
            let bundle = model.policy.as_ref().ok_or_else(|| {
                failure(
                    2,
                    format!("method '{}' has no posterior policy", cfg.train.method.name()),
                )
            })?;
            let spec = probes.ok_or_else(|| failure(2, "--probes is required with --checkpoint"))?;
            let data = dataset(spec)?.load()?;
            let rows: Vec<usize> = (0..count.min(data.len())).collect();
            let fixture = EnumerableFixture {
                backbone: model.backbone.clone(),
                probes: data.x.select_rows(&rows),
                labels: rows.iter().map(|&i| data.y[i]).collect(),
                // the likelihood is measured on the probe itself
                reward: RewardConfig {
                    beta: cfg.train.reward.beta,
                    source: RewardSource::Train,
                },
            };
            enumcheck_report(bundle, &fixture)
        }
        (None, Some(seed)) => {
            let fixture = enumerable_fixture(seed)?;
            let cfg = TrainRunConfig {
                seed,
                ..TrainRunConfig::default()
            };
            let fitted = fit_fixture(&fixture, &cfg, steps)?;
            enumcheck_report(&fitted.bundle, &fixture)
        }
        (None, None) => Err(failure(2, "give either --checkpoint or --fixture")),
    }
}

fn report_json(path: &str, r: &GradReport) -> Value {
    json!({
        "path": path,
        "max_rel_err": r.max_rel_err,
        "worst": r.worst,
        "analytic": r.analytic,
        "numeric": r.numeric,
        "checked": r.checked,
    })
}

/// Backbone check against a gradient with one corrupted entry.
fn corrupted_backbone_check(
    backbone: &BackboneNet,
    x: &DenseMatrix,
    labels: &[usize],
    masks: &[DenseMatrix],
    h: f64,
) -> Result<GradReport, Failure> {
    let mut analytic = backbone.backward(&backbone.forward(x, masks)?, labels)?;
    if let Some(last) = analytic.layers.last_mut() {
        last.bias[0] += 0.5;
    }
    let mut r = finite_diff_gradcheck(
        backbone,
        &analytic,
        |b: &BackboneNet| cross_entropy(&b.forward(x, masks)?, labels),
        h,
    )?;
    r.worst = format!("theta.{}", r.worst);
    Ok(r)
}

fn cmd_gradcheck(config: &Path, h: f64, inject_fault: bool) -> CmdResult {
    let file = load_config(config)?;
    let cfg = &file.train;
    let (train, _, _) = file.dataset.load_split()?;
    let mut dims = vec![train.num_features()];
    dims.extend(&cfg.hidden);
    dims.push(train.num_classes());
    let mut rng = SeededRng::with_stream(cfg.seed, 6000);
    let mut model = Model::new(cfg, &dims, &mut rng)?;
    jitter_biases(&mut model.backbone, 0.1, &mut rng);
    let mut bundle = match &model.policy {
        Some(b) => b.clone(),
        None => PolicyBundle::new(&model.backbone, cfg.temperature, cfg.epsilon, &mut rng),
    };
    perturb_policy(&mut bundle, 0.3, &mut rng);
    let rows: Vec<usize> = (0..train.len().min(8)).collect();
    let batch = train.batch(&rows);
    // the reward is taken on the batch itself so no held-out data is needed
    let reward = RewardConfig {
        beta: cfg.reward.beta,
        source: RewardSource::Train,
    };
    let mut reports = gradcheck_paths(&model.backbone, &bundle, &batch.x, &batch.y, &reward, h, &mut rng)?;
    if inject_fault {
        let masks = gflowout::backbone::ones_masks(batch.x.rows(), &model.backbone.maskable_dims());
        reports[0] = corrupted_backbone_check(&model.backbone, &batch.x, &batch.y, &masks, h)?;
    }
    let names = ["theta", "xi", "phi_gamma"];
    let paths: Vec<Value> = names.iter().zip(&reports).map(|(n, r)| report_json(n, r)).collect();
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("three paths");
    let pass = reports.iter().all(|r| r.passes(GRAD_TOLERANCE));
    print_json(&json!({ "h": h, "tolerance": GRAD_TOLERANCE, "pass": pass, "paths": paths }));
    if pass {
        Ok(())
    } else {
        Err(failure(
            6,
            format!(
                "gradient check failed at {}: relative error {:e} (analytic {:e}, numeric {:e})",
                worst.worst, worst.max_rel_err, worst.analytic, worst.numeric
            ),
        ))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config, out, seeds } => cmd_train(config, out, seeds),
        Command::Eval {
            checkpoint,
            dataset,
            deformation,
            samples,
            split,
        } => cmd_eval(checkpoint, dataset, deformation, samples, *split),
        Command::Ood {
            checkpoint,
            in_dist,
            ood,
            metric,
            samples,
        } => cmd_ood(checkpoint, in_dist, ood, *metric, *samples),
        Command::Enumcheck {
            checkpoint,
            probes,
            count,
            fixture,
            steps,
        } => cmd_enumcheck(checkpoint.as_deref(), probes.as_deref(), *count, *fixture, *steps),
        Command::Gradcheck {
            config,
            h,
            inject_fault,
        } => cmd_gradcheck(config, *h, *inject_fault),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
