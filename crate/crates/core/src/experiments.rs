//! Desk-scale uncertainty and robustness experiments.

use crate::config::{deform, DatasetSpec};
use crate::data::{Dataset, Deformation};
use crate::error::Result;
use crate::inference::{ood_scores, DsMode, UncertaintyMetric};
use crate::metrics::{aupr, auroc};
use crate::numeric::SeededRng;
use crate::trainer::{fit, Method, TrainRunConfig};

/// Median of a non-empty list; the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Training settings shared by both experiments: long enough for every
/// method to converge, with early stopping deciding the snapshot.
pub fn experiment_config(method: Method, seed: u64) -> TrainRunConfig {
    TrainRunConfig {
        method,
        seed,
        epochs: 200,
        patience: 20,
        hidden: vec![32, 32],
        ..TrainRunConfig::default()
    }
}

/// In-distribution and shifted blobs.
#[derive(Debug, Clone, PartialEq)]
pub struct OodFixture {
    pub in_dist: DatasetSpec,
    pub shifted: DatasetSpec,
}

impl OodFixture {
    /// Three blobs on a circle of radius 3; the shifted blobs are rotated by
    /// 60 degrees and pulled in to radius 1.5, which puts them between the
    /// training classes.
    ///
    /// Blobs moved far outside the data are not used: ReLU logits grow
    /// linearly away from the data, so evidence-based uncertainty falls there
    /// and every method ranks such points as the most certain.
    pub fn new(seed: u64) -> Self {
        let blobs = |radius, offset, seed| DatasetSpec::Blobs {
            n: 600,
            k: 3,
            sigma: 0.6,
            radius,
            dim: 2,
            offset,
            shift: 0.0,
            seed,
        };
        Self {
            in_dist: blobs(3.0, 0.0, seed),
            shifted: blobs(1.5, 60.0, seed + 10_000),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodOutcome {
    pub method: Method,
    pub seed: u64,
    pub test_accuracy: f64,
    pub auroc: f64,
    pub aupr: f64,
}

/// Trains on the in-distribution blobs and scores the held-out test rows
/// against the shifted blobs.
pub fn run_ood(fixture: &OodFixture, cfg: &TrainRunConfig, m: usize, metric: UncertaintyMetric) -> Result<OodOutcome> {
    let (train, val, test) = fixture.in_dist.load_split()?;
    let ood = fixture.shifted.load()?;
    let ood = ood.subset(&(0..test.len().min(ood.len())).collect::<Vec<_>>());
    let model = fit(cfg, &train, &val)?.best;
    let mut rng = SeededRng::with_stream(cfg.seed, 3000);
    let (test_accuracy, _) = model.evaluate(&test, m, &mut rng)?;
    let scored = ood_scores(
        &model.backbone,
        model.inference_source()?,
        &test.x,
        &ood.x,
        m,
        metric,
        &mut rng,
    )?;
    Ok(OodOutcome {
        method: cfg.method,
        seed: cfg.seed,
        test_accuracy,
        auroc: auroc(&scored)?,
        aupr: aupr(&scored)?,
    })
}

pub const DS: UncertaintyMetric = UncertaintyMetric::DempsterShafer(DsMode::MeanLogits);

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessOutcome {
    pub method: Method,
    pub seed: u64,
    pub clean_accuracy: f64,
    pub deformed_accuracy: f64,
}

/// Two moons with jitter `noise`, split 60/20/20 with the run seed.
pub fn moons(seed: u64, n: usize, noise: f64) -> DatasetSpec {
    DatasetSpec::Moons { n, noise, seed }
}

/// Clean and deformed test accuracy of the best-validation model.
pub fn run_robustness(
    data: &DatasetSpec,
    deformation: &[Deformation],
    cfg: &TrainRunConfig,
    m: usize,
) -> Result<RobustnessOutcome> {
    let (train, val, test) = data.load_split()?;
    let deformed: Dataset = deform(&test, deformation)?;
    let model = fit(cfg, &train, &val)?.best;
    let mut rng = SeededRng::with_stream(cfg.seed, 4000);
    let (clean_accuracy, _) = model.evaluate(&test, m, &mut rng)?;
    let (deformed_accuracy, _) = model.evaluate(&deformed, m, &mut rng)?;
    Ok(RobustnessOutcome {
        method: cfg.method,
        seed: cfg.seed,
        clean_accuracy,
        deformed_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[7.0]), 7.0);
    }

    #[test]
    fn shifted_centers_sit_between_classes() {
        let f = OodFixture::new(1);
        let b = f.shifted.load().unwrap();
        let centers = crate::data::circle_centers(3, 3.0, 2, 0.0);
        let first = b.x.row(0);
        let d: Vec<f64> = centers
            .iter()
            .map(|c| ((c[0] - first[0]).powi(2) + (c[1] - first[1]).powi(2)).sqrt())
            .collect();
        // equidistant from its two neighboring classes up to the jitter
        assert!((d[0] - d[1]).abs() < 2.0, "{d:?}");
    }
}
