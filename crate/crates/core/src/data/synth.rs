use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numcore::seeded_rng;

use super::dataset::{Dataset, FeatureShape};

/// Isotropic unit-variance Gaussian blobs, one per class, whose means are at
/// least `sep` apart.
///
/// With `classes ≤ dims` the means sit on scaled basis vectors so every pair
/// is exactly `sep` apart; otherwise random directions are rescaled until
/// the closest pair is `sep` apart.
pub fn gen_gaussian_mixture(
    classes: usize,
    samples: usize,
    dims: usize,
    sep: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(invalid("gaussian mixture needs at least 2 classes"));
    }
    if samples < classes {
        return Err(invalid("gaussian mixture needs at least one sample per class"));
    }
    if dims == 0 || !(sep >= 0.0) {
        return Err(invalid("gaussian mixture needs dims ≥ 1 and sep ≥ 0"));
    }
    let mut rng = seeded_rng(seed);
    let means = class_means(classes, dims, sep, &mut rng);

    let mut labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(samples * dims);
    for &y in &labels {
        for j in 0..dims {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push((means[y * dims + j] + z) as f32);
        }
    }
    Dataset::new(features, FeatureShape::Flat(dims), labels, None, classes)
}

fn class_means<R: Rng>(classes: usize, dims: usize, sep: f64, rng: &mut R) -> Vec<f64> {
    let mut means = vec![0.0; classes * dims];
    if sep == 0.0 {
        return means;
    }
    if classes <= dims {
        let r = sep / std::f64::consts::SQRT_2;
        for c in 0..classes {
            means[c * dims + c] = r;
        }
        return means;
    }
    for m in means.iter_mut() {
        *m = StandardNormal.sample(rng);
    }
    let mut closest = f64::INFINITY;
    for a in 0..classes {
        for b in a + 1..classes {
            let d: f64 = (0..dims)
                .map(|j| (means[a * dims + j] - means[b * dims + j]).powi(2))
                .sum::<f64>()
                .sqrt();
            closest = closest.min(d);
        }
    }
    let k = sep / closest.max(1e-12);
    means.iter_mut().for_each(|m| *m *= k);
    means
}

/// Knobs for the sensor-window generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarLikeConfig {
    pub classes: usize,
    pub subjects: usize,
    pub samples: usize,
    pub channels: usize,
    pub length: usize,
    /// Std-dev of the per-subject, per-channel additive offset.
    pub subject_bias: f64,
    pub noise: f64,
}

impl Default for HarLikeConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            subjects: 30,
            samples: 3000,
            channels: 9,
            length: 128,
            subject_bias: 1.0,
            noise: 0.5,
        }
    }
}

/// Multichannel activity-like windows: each class is a set of per-channel
/// sinusoids, each subject adds its own per-channel offset.
pub fn gen_har_like(cfg: &HarLikeConfig, seed: u64) -> Result<Dataset> {
    if cfg.subjects == 0 {
        return Err(invalid("har-like data needs at least one subject"));
    }
    if cfg.classes < 2 || cfg.channels == 0 || cfg.length == 0 {
        return Err(invalid("har-like data needs ≥ 2 classes and non-empty windows"));
    }
    let mut rng = seeded_rng(seed);
    let (c, l) = (cfg.channels, cfg.length);
    let amp: Vec<f64> = (0..cfg.classes * c).map(|_| rng.random_range(0.5..1.5)).collect();
    let phase: Vec<f64> = (0..cfg.classes * c)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    let bias: Vec<f64> = (0..cfg.subjects * c)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            cfg.subject_bias * z
        })
        .collect();

    let mut labels: Vec<usize> = (0..cfg.samples).map(|i| i % cfg.classes).collect();
    labels.shuffle(&mut rng);
    let mut groups: Vec<usize> = (0..cfg.samples).map(|i| i % cfg.subjects).collect();
    groups.shuffle(&mut rng);

    let mut features = Vec::with_capacity(cfg.samples * c * l);
    for (&y, &g) in labels.iter().zip(&groups) {
        let freq = (y + 1) as f64;
        let jitter: f64 = rng.random_range(-0.3..0.3);
        for ch in 0..c {
            let (a, p) = (amp[y * c + ch], phase[y * c + ch] + jitter);
            let b = bias[g * c + ch];
            for t in 0..l {
                let carrier = (std::f64::consts::TAU * freq * t as f64 / l as f64 + p).sin();
                let n: f64 = StandardNormal.sample(&mut rng);
                features.push((a * carrier + b + cfg.noise * n) as f32);
            }
        }
    }
    Dataset::new(
        features,
        FeatureShape::Sequence { channels: c, length: l },
        labels,
        Some(groups),
        cfg.classes,
    )
}
