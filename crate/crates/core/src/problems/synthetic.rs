//! Seeded synthetic datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Targets};
use crate::error::{Error, Result};

/// Linear-model data: standard-normal features, targets `<w_true, a> + noise * xi`.
/// Returns the dataset together with `w_true`.
pub fn gen_least_squares(seed: u64, d: usize, n: usize, noise: f64) -> Result<(Dataset, Vec<f64>)> {
    gen_least_squares_scaled(seed, d, n, noise, 1.0)
}

/// As [`gen_least_squares`], with features multiplied by `feature_scale`.
pub fn gen_least_squares_scaled(
    seed: u64,
    d: usize,
    n: usize,
    noise: f64,
    feature_scale: f64,
) -> Result<(Dataset, Vec<f64>)> {
    if d == 0 {
        return Err(Error::invalid("d", "must be at least 1"));
    }
    if n < d {
        return Err(Error::invalid("n", "need at least d samples"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::invalid("noise", "must be finite and nonnegative"));
    }
    if !(feature_scale > 0.0 && feature_scale.is_finite()) {
        return Err(Error::invalid("feature_scale", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_true: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mut features = Vec::with_capacity(n * d);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let start = features.len();
        features.extend((0..d).map(|_| feature_scale * rng.sample::<f64, _>(StandardNormal)));
        let row = &features[start..];
        let clean: f64 = row.iter().zip(&w_true).map(|(a, w)| a * w).sum();
        let xi: f64 = rng.sample(StandardNormal);
        targets.push(clean + noise * xi);
    }
    Ok((Dataset::new(features, d, Targets::Real(targets))?, w_true))
}

/// Isotropic Gaussian blobs, one per class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of the class centers; samples have unit variance around them.
    pub separation: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 20,
            train_per_class: 200,
            test_per_class: 100,
            separation: 1.0,
        }
    }
}

/// Draws a train and a test split sharing the same class centers.
/// Samples are stored grouped by class.
pub fn gen_blobs(seed: u64, spec: &BlobSpec) -> Result<(Dataset, Dataset)> {
    if spec.classes == 0 || spec.dim == 0 || spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(Error::invalid("blobs", "classes, dim and per-class counts must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> = (0..spec.classes * spec.dim)
        .map(|_| spec.separation * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut draw = |per_class: usize| -> Result<Dataset> {
        let mut features = Vec::with_capacity(spec.classes * per_class * spec.dim);
        let mut labels = Vec::with_capacity(spec.classes * per_class);
        for k in 0..spec.classes {
            let c = &centers[k * spec.dim..(k + 1) * spec.dim];
            for _ in 0..per_class {
                features.extend(c.iter().map(|ci| ci + rng.sample::<f64, _>(StandardNormal)));
                labels.push(k);
            }
        }
        Dataset::new(
            features,
            spec.dim,
            Targets::Labels {
                labels,
                classes: spec.classes,
            },
        )
    };
    let train = draw(spec.train_per_class)?;
    let test = draw(spec.test_per_class)?;
    Ok((train, test))
}
