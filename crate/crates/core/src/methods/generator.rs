use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::numcore::{kaiming_uniform, Tape, Tensor, Var};

/// Conditional feature generator `G(z, y)`: `Linear(noise+C → K)`, ReLU,
/// `Linear(K → K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub params: Vec<Tensor>,
    pub noise_dim: usize,
    pub classes: usize,
    pub feature_dim: usize,
}

impl Generator {
    pub fn new<R: Rng>(noise_dim: usize, classes: usize, feature_dim: usize, rng: &mut R) -> Result<Self> {
        let d_in = noise_dim + classes;
        let params = vec![
            Tensor::new(vec![d_in, feature_dim], kaiming_uniform(d_in, d_in * feature_dim, rng))?.with_grad(),
            Tensor::zeros(vec![feature_dim]).with_grad(),
            Tensor::new(
                vec![feature_dim, feature_dim],
                kaiming_uniform(feature_dim, feature_dim * feature_dim, rng),
            )?
            .with_grad(),
            Tensor::zeros(vec![feature_dim]).with_grad(),
        ];
        Ok(Self {
            params,
            noise_dim,
            classes,
            feature_dim,
        })
    }

    pub fn from_params(params: Vec<Tensor>, noise_dim: usize, classes: usize) -> Result<Self> {
        let ok = params.len() == 4
            && params[0].shape().len() == 2
            && params[0].shape()[0] == noise_dim + classes;
        if !ok {
            return Err(invalid("generator parameters do not match noise_dim + classes"));
        }
        let feature_dim = params[0].shape()[1];
        Ok(Self {
            params,
            noise_dim,
            classes,
            feature_dim,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|t| {
                let (s, d) = (t.shape().to_vec(), t.data().to_vec());
                if trainable {
                    tape.param(s, d)
                } else {
                    tape.constant(s, d)
                }
            })
            .collect()
    }

    /// Random `(noise ‖ onehot(y))` input rows with uniformly drawn labels.
    pub fn sample_inputs<R: Rng>(&self, batch: usize, rng: &mut R) -> (Vec<f32>, Vec<usize>) {
        let width = self.noise_dim + self.classes;
        let mut x = vec![0.0f32; batch * width];
        let mut y = Vec::with_capacity(batch);
        for r in 0..batch {
            for j in 0..self.noise_dim {
                let z: f64 = StandardNormal.sample(rng);
                x[r * width + j] = z as f32;
            }
            let c = rng.random_range(0..self.classes);
            x[r * width + self.noise_dim + c] = 1.0;
            y.push(c);
        }
        (x, y)
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], inputs: &[f32], batch: usize) -> Result<Var> {
        let x = tape.constant(vec![batch, self.noise_dim + self.classes], inputs.to_vec())?;
        let h = tape.linear(x, vars[0], vars[1])?;
        let h = tape.relu(h);
        tape.linear(h, vars[2], vars[3])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::seeded_rng;

    #[test]
    fn large_scale_parameter_count() {
        let mut rng = seeded_rng(0);
        let g = Generator::new(32, 100, 512, &mut rng).unwrap();
        assert_eq!(g.parameter_count(), 132 * 512 + 512 + 512 * 512 + 512);
    }

    #[test]
    fn inputs_are_one_hot_conditioned() {
        let mut rng = seeded_rng(1);
        let g = Generator::new(3, 4, 8, &mut rng).unwrap();
        let (x, y) = g.sample_inputs(5, &mut rng);
        for (r, &c) in y.iter().enumerate() {
            let tail = &x[r * 7 + 3..r * 7 + 7];
            assert_eq!(tail.iter().sum::<f32>(), 1.0);
            assert_eq!(tail[c], 1.0);
        }
    }
}
