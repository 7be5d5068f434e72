//! Seeded datasets, deformations, label noise and splits.

mod idx;

pub use idx::{load_idx, load_idx_dataset, parse_idx, write_idx_images, write_idx_labels, IdxData};

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{arg_err, Result};
use crate::numeric::{DenseMatrix, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub name: String,
    pub generator: String,
    pub seed: u64,
    pub num_classes: usize,
    /// `(height, width)` when rows are flattened images.
    pub grid: Option<(usize, usize)>,
    /// Row positions whose labels were resampled by [`inject_label_noise`].
    pub noise_indices: Vec<usize>,
}

/// Features, labels and provenance. `ids` are row numbers in the generating
/// source and survive splits and subsetting, so overlap between derived
/// sets can be detected.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DenseMatrix,
    pub y: Vec<usize>,
    pub ids: Vec<usize>,
    pub meta: DatasetMeta,
}

/// A mini-batch plus the size `N` of the dataset it was drawn from.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub x: DenseMatrix,
    pub y: Vec<usize>,
    pub dataset_size: usize,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

impl Dataset {
    pub fn new(x: DenseMatrix, y: Vec<usize>, meta: DatasetMeta) -> Result<Self> {
        if x.rows() != y.len() {
            return arg_err(format!("{} rows but {} labels", x.rows(), y.len()));
        }
        if let Some(bad) = y.iter().find(|&&l| l >= meta.num_classes) {
            return arg_err(format!("label {bad} outside [0, {})", meta.num_classes));
        }
        x.check_finite("dataset features")?;
        let ids = (0..y.len()).collect();
        Ok(Self { x, y, ids, meta })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.x.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            meta: DatasetMeta {
                noise_indices: Vec::new(),
                ..self.meta.clone()
            },
        }
    }

    pub fn batch(&self, indices: &[usize]) -> LabeledBatch {
        LabeledBatch {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            dataset_size: self.len(),
        }
    }

    pub fn full_batch(&self) -> LabeledBatch {
        LabeledBatch {
            x: self.x.clone(),
            y: self.y.clone(),
            dataset_size: self.len(),
        }
    }

    /// True if any row of `other` comes from the same source row as a row here.
    pub fn overlaps(&self, other: &Dataset) -> bool {
        if self.meta.name != other.meta.name || self.meta.seed != other.meta.seed {
            return false;
        }
        let mine: std::collections::HashSet<usize> = self.ids.iter().copied().collect();
        other.ids.iter().any(|i| mine.contains(i))
    }

    /// Provenance sidecar as `key=value` lines.
    pub fn provenance(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "name={}", self.meta.name);
        let _ = writeln!(s, "seed={}", self.meta.seed);
        let _ = writeln!(s, "generator={}", self.meta.generator);
        let _ = writeln!(s, "classes={}", self.meta.num_classes);
        let _ = writeln!(s, "rows={}", self.len());
        let noise: Vec<String> = self.meta.noise_indices.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "noise_indices={}", noise.join(","));
        s
    }

    pub fn write_provenance(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.provenance())?;
        Ok(())
    }
}

/// `k` centers evenly spaced on a circle of `radius` in the first two
/// coordinates of a `dim`-dimensional space, starting at angle `offset_deg`.
pub fn circle_centers(k: usize, radius: f64, dim: usize, offset_deg: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|c| {
            let a = offset_deg.to_radians() + 2.0 * std::f64::consts::PI * c as f64 / k as f64;
            let mut v = vec![0.0; dim.max(2)];
            v[0] = radius * a.cos();
            v[1] = radius * a.sin();
            v
        })
        .collect()
}

/// Isotropic Gaussian blobs; row `i` has label `i mod k`, so classes are
/// balanced within one point.
pub fn gen_blobs(seed: u64, n: usize, k: usize, centers: &[Vec<f64>], sigma: f64) -> Result<Dataset> {
    if k < 2 || centers.len() != k {
        return arg_err(format!(
            "need k >= 2 and k centers, got k = {k}, {} centers",
            centers.len()
        ));
    }
    if n < k {
        return arg_err(format!("n = {n} is smaller than k = {k}"));
    }
    let dim = centers[0].len();
    if centers.iter().any(|c| c.len() != dim) {
        return arg_err("centers differ in dimension");
    }
    let mut rng = SeededRng::new(seed);
    let mut x = DenseMatrix::zeros(n, dim);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        for (j, &m) in centers[c].iter().enumerate() {
            x.set(i, j, m + sigma * rng.normal());
        }
        y.push(c);
    }
    Dataset::new(
        x,
        y,
        DatasetMeta {
            name: "blobs".into(),
            generator: format!("blobs(n={n},k={k},sigma={sigma})"),
            seed,
            num_classes: k,
            grid: None,
            noise_indices: Vec::new(),
        },
    )
}

/// Two interleaved half circles: class 0 on the unit upper half circle around
/// the origin, class 1 on the lower half circle around `(1, 0.5)`.
pub fn gen_two_moons(seed: u64, n: usize, noise: f64) -> Result<Dataset> {
    if n == 0 || !n.is_multiple_of(2) {
        return arg_err(format!("two moons needs a positive even n, got {n}"));
    }
    let half = n / 2;
    let mut rng = SeededRng::new(seed);
    let mut x = DenseMatrix::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let j = i / 2;
        let t = if half > 1 {
            std::f64::consts::PI * j as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let (px, py) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        x.set(i, 0, px + noise * rng.normal());
        x.set(i, 1, py + noise * rng.normal());
        y.push(class);
    }
    Dataset::new(
        x,
        y,
        DatasetMeta {
            name: "moons".into(),
            generator: format!("moons(n={n},noise={noise})"),
            seed,
            num_classes: 2,
            grid: None,
            noise_indices: Vec::new(),
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeformationKind {
    /// Rotation about the grid center, in degrees.
    Rotation(f64),
    /// Additive `N(0, σ²)` noise on every feature.
    GaussianNoise(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deformation {
    pub kind: DeformationKind,
    pub seed: u64,
}

impl Deformation {
    pub fn rotation(degrees: f64) -> Self {
        Self {
            kind: DeformationKind::Rotation(degrees),
            seed: 0,
        }
    }

    pub fn gaussian_noise(sigma: f64, seed: u64) -> Self {
        Self {
            kind: DeformationKind::GaussianNoise(sigma),
            seed,
        }
    }

    /// Applies the deformation to raw features.
    pub fn apply_features(
        &self,
        x: &DenseMatrix,
        grid: Option<(usize, usize)>,
        rng: &mut SeededRng,
    ) -> Result<DenseMatrix> {
        match self.kind {
            DeformationKind::GaussianNoise(sigma) => {
                if sigma < 0.0 {
                    return arg_err(format!("negative noise sigma {sigma}"));
                }
                if sigma == 0.0 {
                    return Ok(x.clone());
                }
                let mut out = x.clone();
                for v in out.as_mut_slice() {
                    *v += sigma * rng.normal();
                }
                Ok(out)
            }
            DeformationKind::Rotation(deg) => {
                let (h, w) = match grid {
                    Some(g) if g.0 * g.1 == x.cols() => g,
                    Some(_) => return arg_err("grid shape does not match feature count"),
                    None => return arg_err("rotation needs grid-shaped inputs"),
                };
                let mut out = DenseMatrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    rotate_image(x.row(r), out.row_mut(r), h, w, deg);
                }
                Ok(out)
            }
        }
    }
}

/// Nearest-neighbor rotation: every target pixel pulls from the source pixel
/// that rotates onto it; sources outside the grid read as 0.
fn rotate_image(src: &[f64], dst: &mut [f64], h: usize, w: usize, degrees: f64) {
    let theta = degrees.to_radians();
    let (s, c) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    for r in 0..h {
        for col in 0..w {
            let dy = r as f64 - cy;
            let dx = col as f64 - cx;
            let sx = (cx + c * dx + s * dy).round();
            let sy = (cy - s * dx + c * dy).round();
            dst[r * w + col] = if sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h {
                src[sy as usize * w + sx as usize]
            } else {
                0.0
            };
        }
    }
}

/// Deformed copy of `dataset`; labels and size are unchanged.
pub fn apply_deformation(dataset: &Dataset, d: &Deformation) -> Result<Dataset> {
    let mut rng = SeededRng::new(d.seed);
    let x = d.apply_features(&dataset.x, dataset.meta.grid, &mut rng)?;
    Ok(Dataset { x, ..dataset.clone() })
}

/// Resamples the labels of `⌊fraction · n⌋` seeded-chosen rows uniformly over
/// all classes (a resampled label may equal the original).
pub fn inject_label_noise(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return arg_err(format!("noise fraction {fraction} outside [0, 1]"));
    }
    let n = dataset.len();
    let count = (fraction * n as f64 + 1e-9).floor() as usize;
    let mut rng = SeededRng::new(seed);
    let mut chosen: Vec<usize> = rng.permutation(n).into_iter().take(count).collect();
    chosen.sort_unstable();
    let mut out = dataset.clone();
    for &i in &chosen {
        out.y[i] = rng.below(dataset.num_classes());
    }
    out.meta.noise_indices = chosen;
    Ok(out)
}

/// Seeded permutation then contiguous cuts into train/validation/test.
///
/// Each share is `⌊ratio · n⌋`; points left over by the flooring go to train.
pub fn split(dataset: &Dataset, ratios: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return arg_err(format!("split ratios {ratios:?} must be non-negative and sum to 1"));
    }
    let n = dataset.len();
    let sizes: Vec<usize> = ratios.iter().map(|r| (r * n as f64 + 1e-9).floor() as usize).collect();
    let n_val = sizes[1];
    let n_test = sizes[2];
    let n_train = n - n_val - n_test;
    let perm = SeededRng::new(seed).permutation(n);
    Ok((
        dataset.subset(&perm[..n_train]),
        dataset.subset(&perm[n_train..n_train + n_val]),
        dataset.subset(&perm[n_train + n_val..]),
    ))
}
