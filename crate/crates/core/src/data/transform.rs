use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numcore::seeded_rng;

use super::dataset::FeatureShape;
use super::substream;

const PURPOSE_DOMAIN: u64 = 3;

/// Invertible per-domain view change: a random rotation followed by a scalar
/// gain. Sequences are rotated across channels at every time step.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainTransform {
    dim: usize,
    /// Row-major `dim × dim` orthogonal matrix.
    rotation: Vec<f64>,
    scale: f64,
    shape: FeatureShape,
}

impl DomainTransform {
    /// Domain 0 keeps unit gain, so a single-domain run is a pure rotation.
    pub fn new(shape: FeatureShape, seed: u64, domain: usize) -> Self {
        let dim = match shape {
            FeatureShape::Flat(d) => d,
            FeatureShape::Sequence { channels, .. } => channels,
        };
        let mut rng = seeded_rng(substream(seed, domain as u64, 0, PURPOSE_DOMAIN));
        let rotation = random_rotation(dim, &mut rng);
        let scale = if domain == 0 {
            1.0
        } else {
            2f64.powf(rng.random_range(-1.0..=1.0))
        };
        Self {
            dim,
            rotation,
            scale,
            shape,
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        self.map(x, false)
    }

    pub fn invert(&self, y: &[f32]) -> Vec<f32> {
        self.map(y, true)
    }

    fn map(&self, x: &[f32], inverse: bool) -> Vec<f32> {
        let d = self.dim;
        let (steps, stride) = match self.shape {
            FeatureShape::Flat(_) => (1, 1),
            FeatureShape::Sequence { length, .. } => (length, length),
        };
        let mut out = vec![0.0f32; x.len()];
        for t in 0..steps {
            for i in 0..d {
                let mut acc = 0.0f64;
                for j in 0..d {
                    let r = if inverse {
                        self.rotation[j * d + i]
                    } else {
                        self.rotation[i * d + j]
                    };
                    acc += r * x[j * stride + t] as f64;
                }
                out[i * stride + t] = if inverse {
                    (acc / self.scale) as f32
                } else {
                    (acc * self.scale) as f32
                };
            }
        }
        out
    }
}

/// Gram-Schmidt orthonormalisation of a Gaussian matrix.
fn random_rotation<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    let mut q: Vec<f64> = (0..d * d).map(|_| StandardNormal.sample(rng)).collect();
    for i in 0..d {
        for k in 0..i {
            let dot: f64 = (0..d).map(|j| q[i * d + j] * q[k * d + j]).sum();
            for j in 0..d {
                q[i * d + j] -= dot * q[k * d + j];
            }
        }
        let norm: f64 = (0..d).map(|j| q[i * d + j].powi(2)).sum::<f64>().sqrt();
        for j in 0..d {
            q[i * d + j] /= norm;
        }
    }
    q
}
