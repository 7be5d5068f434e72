//! Plain `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every other line must
//! hold exactly one known key; unknown, duplicate or malformed entries are
//! reported with their line number.

use std::path::PathBuf;
use std::str::FromStr;

use crate::data::{
    apply_deformation, circle_centers, gen_blobs, gen_two_moons, load_idx_dataset, split, Dataset, Deformation,
};
use crate::error::{Error, Result};
use crate::objectives::RewardSource;
use crate::trainer::TrainRunConfig;

pub const KEYS: [&str; 19] = [
    "method",
    "objective",
    "beta",
    "reward_source",
    "temperature",
    "epsilon",
    "epochs",
    "batch_size",
    "lr_backbone",
    "lr_policy",
    "lr_partition",
    "lr_prior",
    "layers",
    "M_inference",
    "seed",
    "dataset",
    "deformation",
    "early_stop_patience",
    "dropout_rate",
];

fn config_err<T>(line: usize, msg: impl std::fmt::Display) -> Result<T> {
    Err(Error::Config(format!("line {line}: {msg}")))
}

/// Parses `k1=v1,k2=v2` argument lists of dataset and deformation specs.
fn spec_args(kind: &str, args: &str) -> Result<Vec<(String, String)>> {
    if args.trim().is_empty() {
        return Ok(Vec::new());
    }
    args.split(',')
        .map(|kv| match kv.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
            _ => Err(Error::Config(format!("{kind}: expected key=value, got '{kv}'"))),
        })
        .collect()
}

fn take<T: FromStr>(args: &mut Vec<(String, String)>, kind: &str, key: &str, default: T) -> Result<T> {
    match args.iter().position(|(k, _)| k == key) {
        None => Ok(default),
        Some(i) => {
            let (_, v) = args.remove(i);
            v.parse()
                .map_err(|_| Error::Config(format!("{kind}: cannot parse {key} = '{v}'")))
        }
    }
}

fn finish(args: Vec<(String, String)>, kind: &str) -> Result<()> {
    match args.first() {
        Some((k, _)) => Err(Error::Config(format!("{kind}: unknown argument '{k}'"))),
        None => Ok(()),
    }
}

/// A reproducible data source.
///
/// * `blobs:n=600,k=3,sigma=0.6,radius=3,dim=2,offset=0,shift=0,seed=0`
/// * `moons:n=400,noise=0.1,seed=0`
/// * `idx:images=PATH,labels=PATH,classes=10,limit=N`
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Blobs {
        n: usize,
        k: usize,
        sigma: f64,
        radius: f64,
        dim: usize,
        /// Angle of the first center, in degrees.
        offset: f64,
        /// Added to every coordinate of every center.
        shift: f64,
        seed: u64,
    },
    Moons {
        n: usize,
        noise: f64,
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        classes: usize,
        limit: Option<usize>,
    },
}

impl FromStr for DatasetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s.trim().split_once(':').unwrap_or((s.trim(), ""));
        let mut a = spec_args(kind, rest)?;
        let spec = match kind {
            "blobs" => DatasetSpec::Blobs {
                n: take(&mut a, kind, "n", 600)?,
                k: take(&mut a, kind, "k", 3)?,
                sigma: take(&mut a, kind, "sigma", 0.6)?,
                radius: take(&mut a, kind, "radius", 3.0)?,
                dim: take(&mut a, kind, "dim", 2)?,
                offset: take(&mut a, kind, "offset", 0.0)?,
                shift: take(&mut a, kind, "shift", 0.0)?,
                seed: take(&mut a, kind, "seed", 0)?,
            },
            "moons" => DatasetSpec::Moons {
                n: take(&mut a, kind, "n", 400)?,
                noise: take(&mut a, kind, "noise", 0.1)?,
                seed: take(&mut a, kind, "seed", 0)?,
            },
            "idx" => {
                let images: String = take(&mut a, kind, "images", String::new())?;
                let labels: String = take(&mut a, kind, "labels", String::new())?;
                if images.is_empty() || labels.is_empty() {
                    return Err(Error::Config("idx: both images and labels paths are required".into()));
                }
                let limit: usize = take(&mut a, kind, "limit", 0)?;
                DatasetSpec::Idx {
                    images: images.into(),
                    labels: labels.into(),
                    classes: take(&mut a, kind, "classes", 10)?,
                    limit: (limit > 0).then_some(limit),
                }
            }
            other => return Err(Error::Config(format!("unknown dataset kind '{other}'"))),
        };
        finish(a, kind)?;
        Ok(spec)
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Blobs {
                n,
                k,
                sigma,
                radius,
                dim,
                offset,
                shift,
                seed,
            } => {
                let mut centers = circle_centers(*k, *radius, *dim, *offset);
                centers.iter_mut().flatten().for_each(|c| *c += shift);
                gen_blobs(*seed, *n, *k, &centers, *sigma)
            }
            DatasetSpec::Moons { n, noise, seed } => gen_two_moons(*seed, *n, *noise),
            DatasetSpec::Idx {
                images,
                labels,
                classes,
                limit,
            } => {
                let ds = load_idx_dataset(images, labels, *classes)?;
                Ok(match limit {
                    Some(l) if *l < ds.len() => ds.subset(&(0..*l).collect::<Vec<_>>()),
                    _ => ds,
                })
            }
        }
    }

    /// Loads and splits 60/20/20 with the dataset seed.
    pub fn load_split(&self) -> Result<(Dataset, Dataset, Dataset)> {
        let seed = match self {
            DatasetSpec::Blobs { seed, .. } | DatasetSpec::Moons { seed, .. } => *seed,
            DatasetSpec::Idx { .. } => 0,
        };
        split(&self.load()?, [0.6, 0.2, 0.2], seed)
    }
}

/// `none`, `noise:sigma=S,seed=N`, `rotation:deg=D`, or several joined by `;`.
pub fn parse_deformations(s: &str) -> Result<Vec<Deformation>> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|part| {
            let (kind, rest) = part.trim().split_once(':').unwrap_or((part.trim(), ""));
            let mut a = spec_args(kind, rest)?;
            let d = match kind {
                "noise" => {
                    Deformation::gaussian_noise(take(&mut a, kind, "sigma", 0.0)?, take(&mut a, kind, "seed", 0)?)
                }
                "rotation" => Deformation::rotation(take(&mut a, kind, "deg", 0.0)?),
                other => return Err(Error::Config(format!("unknown deformation '{other}'"))),
            };
            finish(a, kind)?;
            Ok(d)
        })
        .collect()
}

/// Applies each deformation in turn.
pub fn deform(dataset: &Dataset, deformations: &[Deformation]) -> Result<Dataset> {
    deformations
        .iter()
        .try_fold(dataset.clone(), |d, def| apply_deformation(&d, def))
}

/// A parsed configuration file together with its original text.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfigFile {
    pub text: String,
    pub train: TrainRunConfig,
    pub dataset: DatasetSpec,
    pub deformation: Vec<Deformation>,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainRunConfig::default();
        let mut reward_source = "train".to_string();
        let mut dataset = None;
        let mut deformation = Vec::new();
        let mut seen: Vec<&str> = Vec::new();

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            // `#` starts a comment anywhere on the line
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                return config_err(line, format!("expected key = value, got '{content}'"));
            };
            let (k, v) = (k.trim(), v.trim());
            let Some(&key) = KEYS.iter().find(|&&known| known == k) else {
                return config_err(line, format!("unknown key '{k}'"));
            };
            if seen.contains(&key) {
                return config_err(line, format!("duplicate key '{key}'"));
            }
            seen.push(key);

            fn num<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
                v.parse()
                    .or_else(|_| config_err(line, format!("cannot parse {key} = '{v}'")))
            }
            let with_line = |e: Error| match e {
                Error::Config(m) => Error::Config(format!("line {line}: {m}")),
                other => other,
            };
            match key {
                "method" => cfg.method = v.parse().map_err(with_line)?,
                "objective" => cfg.objective = v.parse().map_err(with_line)?,
                "beta" => cfg.reward.beta = num(line, key, v)?,
                "reward_source" => reward_source = v.to_string(),
                "temperature" => cfg.temperature = num(line, key, v)?,
                "epsilon" => cfg.epsilon = num(line, key, v)?,
                "epochs" => cfg.epochs = num(line, key, v)?,
                "batch_size" => cfg.batch_size = num(line, key, v)?,
                "lr_backbone" => cfg.lr.backbone = num(line, key, v)?,
                "lr_policy" => cfg.lr.policy = num(line, key, v)?,
                "lr_partition" => cfg.lr.partition = num(line, key, v)?,
                "lr_prior" => cfg.lr.prior = num(line, key, v)?,
                "layers" => {
                    cfg.hidden = if v.is_empty() {
                        Vec::new()
                    } else {
                        v.split(',').map(|w| num(line, key, w.trim())).collect::<Result<_>>()?
                    }
                }
                "M_inference" => cfg.inference_samples = num(line, key, v)?,
                "seed" => cfg.seed = num(line, key, v)?,
                "dataset" => dataset = Some(v.parse::<DatasetSpec>().map_err(with_line)?),
                "deformation" => deformation = parse_deformations(v).map_err(with_line)?,
                "early_stop_patience" => cfg.patience = num(line, key, v)?,
                "dropout_rate" => cfg.dropout_rate = num(line, key, v)?,
                _ => unreachable!("every key in KEYS is handled"),
            }
        }

        cfg.reward.source = match reward_source.as_str() {
            "train" => RewardSource::Train,
            "validation" => RewardSource::Validation,
            "augmented" => {
                if deformation.is_empty() {
                    return Err(Error::Config("reward_source = augmented needs a deformation".into()));
                }
                RewardSource::AugmentedValidation(deformation.clone())
            }
            other => return Err(Error::Config(format!("unknown reward_source '{other}'"))),
        };
        let dataset = dataset.ok_or_else(|| Error::Config("missing required key 'dataset'".into()))?;
        cfg.validate()?;
        Ok(Self {
            text: text.to_string(),
            train: cfg,
            dataset,
            deformation,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
