//! Seeded synthetic activations with a known in/out-of-distribution split.
//!
//! In-distribution records for class `c` are Gaussian around a fixed
//! per-class, per-element mean. Out-of-distribution records come from one of
//! the noise families in [`OodKind`]. Values are rounded through `f32` so the
//! in-memory benchmark equals what a reader recovers from the GACT files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, StandardNormal, Uniform};

use crate::error::{OodError, Result};
use crate::gram::FeatureMap;

use super::gact::{write_activations, GactLayout};
use super::{seeded_rng, ActivationRecord};

const STREAM_MEANS: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_ID_TEST: u64 = 2;
const STREAM_OOD: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OodKind {
    /// Isotropic standard Gaussian, i.i.d. per value.
    Gaussian,
    /// Each value is -1 or +1 with equal probability.
    Rademacher,
    /// Each value is 0 or 1 with equal probability.
    Bernoulli,
    /// A random class's in-distribution mean, shifted up and with inflated noise.
    Shifted,
}

impl OodKind {
    pub const ALL: [OodKind; 4] = [
        OodKind::Gaussian,
        OodKind::Rademacher,
        OodKind::Bernoulli,
        OodKind::Shifted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OodKind::Gaussian => "gaussian",
            OodKind::Rademacher => "rademacher",
            OodKind::Bernoulli => "bernoulli",
            OodKind::Shifted => "shifted",
        }
    }
}

impl FromStr for OodKind {
    type Err = OodError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| OodError::InvalidArgument(format!("unknown OOD kind {s:?}")))
    }
}

impl fmt::Display for OodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub layer_shapes: Vec<(usize, usize)>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub ood_count: usize,
    pub ood_kind: OodKind,
    pub seed: u64,
    /// Per-value standard deviation of in-distribution activations.
    pub noise_std: f64,
    /// Class means are drawn uniformly from this range.
    pub mean_range: (f64, f64),
    /// Mean offset and noise inflation for [`OodKind::Shifted`].
    pub shift: f64,
    pub shift_noise_scale: f64,
}

impl SyntheticConfig {
    pub fn new(num_classes: usize, layer_shapes: Vec<(usize, usize)>, per_class: usize) -> Self {
        Self {
            num_classes,
            layer_shapes,
            train_per_class: per_class,
            test_per_class: per_class,
            ood_count: num_classes * per_class,
            ood_kind: OodKind::Rademacher,
            seed: 0,
            noise_std: 0.2,
            mean_range: (0.5, 2.5),
            shift: 0.75,
            shift_noise_scale: 1.5,
        }
    }

    pub fn layout(&self) -> GactLayout {
        GactLayout::new(self.num_classes, self.layer_shapes.clone())
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.layer_shapes.is_empty() {
            return Err(OodError::InvalidArgument(
                "need at least one class and one layer".into(),
            ));
        }
        if self.layer_shapes.iter().any(|&(c, p)| c == 0 || p == 0) {
            return Err(OodError::InvalidArgument("layer shapes must be non-empty".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(OodError::InvalidArgument("noise_std must be finite and >= 0".into()));
        }
        if self.mean_range.0 > self.mean_range.1 {
            return Err(OodError::InvalidArgument("empty mean range".into()));
        }
        Ok(())
    }
}

/// Parses a comma list of `CxP` layer shapes, e.g. `8x16,16x8,32x4`.
pub fn parse_layer_shapes(s: &str) -> Result<Vec<(usize, usize)>> {
    let bad = || OodError::InvalidArgument(format!("cannot parse layer shapes {s:?}"));
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|part| {
            let (c, p) = part.split_once(['x', 'X']).ok_or_else(bad)?;
            let c: usize = c.trim().parse().map_err(|_| bad())?;
            let p: usize = p.trim().parse().map_err(|_| bad())?;
            if c == 0 || p == 0 {
                return Err(bad());
            }
            Ok((c, p))
        })
        .collect::<Result<Vec<_>>>()
        .and_then(|v| if v.is_empty() { Err(bad()) } else { Ok(v) })
}

#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub layout: GactLayout,
    pub train: Vec<ActivationRecord>,
    pub id_test: Vec<ActivationRecord>,
    pub ood_test: Vec<ActivationRecord>,
}

/// Paths written by [`SyntheticBenchmark::write_to_dir`].
#[derive(Debug, Clone)]
pub struct BenchmarkFiles {
    pub train: PathBuf,
    pub id_test: PathBuf,
    pub ood_test: PathBuf,
}

impl SyntheticBenchmark {
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<BenchmarkFiles> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let files = BenchmarkFiles {
            train: dir.join("train.gact"),
            id_test: dir.join("id_test.gact"),
            ood_test: dir.join("ood_test.gact"),
        };
        write_activations(&files.train, &self.layout, &self.train)?;
        write_activations(&files.id_test, &self.layout, &self.id_test)?;
        write_activations(&files.ood_test, &self.layout, &self.ood_test)?;
        Ok(files)
    }
}

fn storage_round(v: f64) -> f64 {
    f64::from(v as f32)
}

fn class_means(cfg: &SyntheticConfig) -> Vec<Vec<Vec<f64>>> {
    let mut rng = seeded_rng(cfg.seed, STREAM_MEANS);
    let dist = Uniform::new_inclusive(cfg.mean_range.0, cfg.mean_range.1).expect("validated range");
    (0..cfg.num_classes)
        .map(|_| {
            cfg.layer_shapes
                .iter()
                .map(|&(c, p)| (0..c * p).map(|_| dist.sample(&mut rng)).collect())
                .collect()
        })
        .collect()
}

fn gaussian_record(
    means: &[Vec<f64>],
    shapes: &[(usize, usize)],
    offset: f64,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<FeatureMap>> {
    let noise = Normal::new(0.0, std).map_err(|e| OodError::InvalidArgument(e.to_string()))?;
    means
        .iter()
        .zip(shapes)
        .map(|(mu, &(c, p))| {
            let values = mu
                .iter()
                .map(|m| storage_round(m + offset + noise.sample(rng)))
                .collect();
            FeatureMap::new(c, p, values)
        })
        .collect()
}

fn id_split(
    cfg: &SyntheticConfig,
    means: &[Vec<Vec<f64>>],
    per_class: usize,
    stream: u64,
) -> Result<Vec<ActivationRecord>> {
    let mut rng = seeded_rng(cfg.seed, stream);
    (0..per_class * cfg.num_classes)
        .map(|i| {
            let class = i % cfg.num_classes;
            Ok(ActivationRecord {
                predicted_class: class,
                layers: gaussian_record(&means[class], &cfg.layer_shapes, 0.0, cfg.noise_std, &mut rng)?,
            })
        })
        .collect()
}

fn noise_layers(
    shapes: &[(usize, usize)],
    rng: &mut ChaCha8Rng,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> f64,
) -> Result<Vec<FeatureMap>> {
    shapes
        .iter()
        .map(|&(c, p)| FeatureMap::new(c, p, (0..c * p).map(|_| storage_round(draw(rng))).collect()))
        .collect()
}

fn ood_split(cfg: &SyntheticConfig, means: &[Vec<Vec<f64>>]) -> Result<Vec<ActivationRecord>> {
    let mut rng = seeded_rng(cfg.seed, STREAM_OOD);
    let coin = Bernoulli::new(0.5).expect("valid probability");
    (0..cfg.ood_count)
        .map(|_| {
            let class = rng.random_range(0..cfg.num_classes);
            let layers = match cfg.ood_kind {
                OodKind::Gaussian => noise_layers(&cfg.layer_shapes, &mut rng, |r| StandardNormal.sample(r))?,
                OodKind::Rademacher => {
                    noise_layers(&cfg.layer_shapes, &mut rng, |r| if coin.sample(r) { 1.0 } else { -1.0 })?
                }
                OodKind::Bernoulli => {
                    noise_layers(&cfg.layer_shapes, &mut rng, |r| if coin.sample(r) { 1.0 } else { 0.0 })?
                }
                OodKind::Shifted => gaussian_record(
                    &means[class],
                    &cfg.layer_shapes,
                    cfg.shift,
                    cfg.noise_std * cfg.shift_noise_scale,
                    &mut rng,
                )?,
            };
            Ok(ActivationRecord {
                predicted_class: class,
                layers,
            })
        })
        .collect()
}

/// Generates train, in-distribution test and OOD test records.
///
/// Each split draws from its own ChaCha stream, so the in-distribution
/// splits do not depend on the OOD kind or count.
pub fn generate_synthetic_benchmark(cfg: &SyntheticConfig) -> Result<SyntheticBenchmark> {
    cfg.validate()?;
    let means = class_means(cfg);
    Ok(SyntheticBenchmark {
        layout: cfg.layout(),
        train: id_split(cfg, &means, cfg.train_per_class, STREAM_TRAIN)?,
        id_test: id_split(cfg, &means, cfg.test_per_class, STREAM_ID_TEST)?,
        ood_test: ood_split(cfg, &means)?,
    })
}
