//! Noisy linear response `y_i = θ0 + θ1 d_i + noise_i`.

use nalgebra::DMatrix;
use rand::RngCore;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_path_dims, Domain, SimulatorModel};
use crate::error::Result;

/// Γ(2, 2) read as shape 2, scale 2 (mean 4, variance 8).
pub const GAMMA_SHAPE: f64 = 2.0;
pub const GAMMA_SCALE: f64 = 2.0;

/// Independent Gaussian prior on `[θ0, θ1]`; a zero std pins that coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearPrior {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl Default for LinearPrior {
    fn default() -> Self {
        Self {
            mean: [0.0, 0.0],
            std: [3.0, 3.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LinearNoise {
    /// Standard normal plus Γ(shape 2, scale 2) per measurement.
    GaussianGamma,
    /// Zero-mean normal only; MI has a closed form.
    Gaussian { std: f64 },
}

#[derive(Debug, Clone)]
pub struct LinearModel {
    name: String,
    dim: usize,
    prior: LinearPrior,
    noise: LinearNoise,
    domain: Domain,
    gamma: Gamma<f64>,
}

impl LinearModel {
    /// Gaussian + Gamma noise on `[-10, 10]^dim` with prior N(0, 3²I).
    pub fn noisy(dim: usize) -> Self {
        Self::build("linear", dim, LinearNoise::GaussianGamma)
    }

    /// Unit-variance Gaussian noise only.
    pub fn gaussian(dim: usize) -> Self {
        Self::build("gaussian-linear", dim, LinearNoise::Gaussian { std: 1.0 })
    }

    fn build(name: &str, dim: usize, noise: LinearNoise) -> Self {
        Self {
            name: name.to_string(),
            dim,
            prior: LinearPrior::default(),
            noise,
            domain: Domain::cube(dim, -10.0, 10.0),
            gamma: Gamma::new(GAMMA_SHAPE, GAMMA_SCALE).expect("valid gamma parameters"),
        }
    }

    pub fn with_prior(mut self, prior: LinearPrior) -> Self {
        self.prior = prior;
        self
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    pub fn prior(&self) -> &LinearPrior {
        &self.prior
    }

    pub fn noise(&self) -> LinearNoise {
        self.noise
    }
}

impl SimulatorModel for LinearModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn theta_dim(&self) -> usize {
        2
    }

    fn design_dim(&self) -> usize {
        self.dim
    }

    fn noise_dim(&self) -> usize {
        match self.noise {
            LinearNoise::GaussianGamma => 2 * self.dim,
            LinearNoise::Gaussian { .. } => self.dim,
        }
    }

    fn domain(&self) -> &Domain {
        &self.domain
    }

    fn sample_prior(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        for i in 0..2 {
            let z: f64 = StandardNormal.sample(rng);
            out[i] = self.prior.mean[i] + self.prior.std[i] * z;
        }
    }

    fn prior_density(&self, theta: &[f64]) -> f64 {
        // Pinned coordinates contribute a factor of one.
        (0..2)
            .filter(|&i| self.prior.std[i] > 0.0)
            .map(|i| normal_pdf(theta[i], self.prior.mean[i], self.prior.std[i]))
            .product()
    }

    fn sample_noise(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        match self.noise {
            LinearNoise::GaussianGamma => {
                let (eps, nu) = out.split_at_mut(self.dim);
                for e in eps.iter_mut() {
                    *e = StandardNormal.sample(rng);
                }
                for v in nu.iter_mut() {
                    *v = self.gamma.sample(rng);
                }
            }
            LinearNoise::Gaussian { std } => {
                for e in out.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *e = std * z;
                }
            }
        }
    }

    fn sample_path(
        &self,
        theta: &[f64],
        design: &[f64],
        noise: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        check_path_dims(self, theta, design, noise, out)?;
        let (offset, slope) = (theta[0], theta[1]);
        for (i, (y, d)) in out.iter_mut().zip(design).enumerate() {
            *y = offset + slope * d + noise[i];
        }
        if let LinearNoise::GaussianGamma = self.noise {
            for (y, nu) in out.iter_mut().zip(&noise[self.dim..]) {
                *y += nu;
            }
        }
        Ok(())
    }

    fn has_gradients(&self) -> bool {
        true
    }

    fn jacobian(&self, theta: &[f64], design: &[f64], noise: &[f64]) -> Result<DMatrix<f64>> {
        check_path_dims(self, theta, design, noise, &vec![0.0; self.dim])?;
        Ok(linear_jacobian([theta[0], theta[1]], self.dim))
    }

    fn accumulate_jacobian_transpose(
        &self,
        theta: &[f64],
        _design: &[f64],
        _noise: &[f64],
        v: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        let slope = theta[1];
        for (o, g) in out.iter_mut().zip(v) {
            *o += slope * g;
        }
        Ok(())
    }
}

pub(crate) fn normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    (-0.5 * z * z).exp() / (std * (2.0 * std::f64::consts::PI).sqrt())
}

/// `θ0 + θ1 d_i + ε_i + ν_i` for every coordinate.
pub fn linear_sample(theta: [f64; 2], design: &[f64], eps: &[f64], nu: &[f64]) -> Vec<f64> {
    design
        .iter()
        .zip(eps.iter().zip(nu))
        .map(|(d, (e, n))| theta[0] + theta[1] * d + e + n)
        .collect()
}

/// `θ1 · I`, independent of the design and the noise.
pub fn linear_jacobian(theta: [f64; 2], dim: usize) -> DMatrix<f64> {
    DMatrix::from_diagonal_element(dim, dim, theta[1])
}

pub fn gaussian_linear_sample(theta: [f64; 2], design: &[f64], eps: &[f64]) -> Vec<f64> {
    design
        .iter()
        .zip(eps)
        .map(|(d, e)| theta[0] + theta[1] * d + e)
        .collect()
}

pub fn gaussian_linear_jacobian(theta: [f64; 2], dim: usize) -> DMatrix<f64> {
    linear_jacobian(theta, dim)
}

#[cfg(test)]
mod tests {
    use super::super::testing::{assert_jacobian_close, fd_jacobian, mean_var};
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_substitutions() {
        assert_eq!(linear_sample([2.0, 5.0], &[0.0], &[0.0], &[0.0]), vec![2.0]);
        assert_eq!(linear_sample([2.0, 5.0], &[1.0], &[0.5], &[1.0]), vec![8.5]);
        assert_eq!(gaussian_linear_sample([2.0, 5.0], &[1.0], &[0.0]), vec![7.0]);

        let model = LinearModel::noisy(1);
        let mut y = [0.0];
        model
            .sample_path(&[2.0, 5.0], &[1.0], &[0.5, 1.0], &mut y)
            .unwrap();
        assert_eq!(y, [8.5]);
    }

    #[test]
    fn jacobian_values() {
        let j = linear_jacobian([0.0, 5.0], 2);
        assert_eq!(j, DMatrix::from_row_slice(2, 2, &[5.0, 0.0, 0.0, 5.0]));
        assert!(linear_jacobian([1.0, 0.0], 3).iter().all(|&x| x == 0.0));
        assert_eq!(gaussian_linear_jacobian([0.0, 3.0], 1)[(0, 0)], 3.0);
    }

    #[test]
    fn mean_at_zero_design_pins_gamma_convention() {
        let model = LinearModel::noisy(1);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut noise = vec![0.0; 2];
        let mut y = [0.0];
        let ys: Vec<f64> = (0..1_000_000)
            .map(|_| {
                model.sample_noise(&mut rng, &mut noise);
                model.sample_path(&[2.0, 5.0], &[0.0], &noise, &mut y).unwrap();
                y[0]
            })
            .collect();
        let (mean, _) = mean_var(&ys);
        // 2 + shape·scale; standard error ≈ 3e-3.
        assert!((mean - 6.0).abs() < 0.015, "mean {mean}");
    }

    #[test]
    fn gaussian_variant_has_unit_variance() {
        let model = LinearModel::gaussian(1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ys: Vec<f64> = (0..1_000_000)
            .map(|_| model.simulate(&[2.0, 5.0], &[3.0], &mut rng).unwrap()[0])
            .collect();
        let (mean, var) = mean_var(&ys);
        assert!((mean - 17.0).abs() < 0.01);
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn jacobian_matches_frozen_noise_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for model in [LinearModel::noisy(4), LinearModel::gaussian(4)] {
            let theta = model.draw_prior(&mut rng);
            let design = model.domain().sample_uniform(&mut rng);
            let noise = model.draw_noise(&mut rng);
            let analytic = model.jacobian(&theta, &design, noise.as_slice()).unwrap();
            let fd = fd_jacobian(&model, &theta, &design, noise.as_slice(), 1e-4);
            assert_jacobian_close(&analytic, &fd, 1e-8);
        }
    }

    #[test]
    fn replay_is_deterministic() {
        let model = LinearModel::noisy(3);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let noise = model.draw_noise(&mut rng);
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        model.sample_path(&[1.0, 2.0], &[1.0, 2.0, 3.0], noise.as_slice(), &mut a).unwrap();
        model.sample_path(&[1.0, 2.0], &[1.0, 2.0, 3.0], noise.as_slice(), &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let model = LinearModel::noisy(2);
        let mut y = [0.0; 2];
        assert!(model.sample_path(&[1.0, 2.0], &[1.0], &[0.0; 4], &mut y).is_err());
        assert!(model.sample_path(&[1.0, 2.0], &[1.0, 1.0], &[0.0; 2], &mut y).is_err());
    }

    proptest! {
        #[test]
        fn prop_jacobian_constant_in_design(
            slope in -10.0f64..10.0,
            d1 in proptest::collection::vec(-10.0f64..10.0, 3),
            d2 in proptest::collection::vec(-10.0f64..10.0, 3),
        ) {
            let model = LinearModel::noisy(3);
            let noise = [0.0; 6];
            let a = model.jacobian(&[0.0, slope], &d1, &noise).unwrap();
            let b = model.jacobian(&[0.0, slope], &d2, &noise).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
