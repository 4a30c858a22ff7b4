//! Noisy measurements of a stationary waveform: `y_i = sin(ω t_i) + σ ε_i`,
//! `ω ~ U(0, π)`, `σ = 0.1`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use super::{check_path_dims, Domain, SimulatorModel};
use crate::error::Result;

const NOISE_STD: f64 = 0.1;

pub fn oscillatory_sample(omega: f64, t: f64, eps: f64) -> f64 {
    (omega * t).sin() + NOISE_STD * eps
}

#[derive(Debug, Clone)]
pub struct OscillatoryModel {
    dim: usize,
    domain: Domain,
}

impl OscillatoryModel {
    /// `dim` measurement times on `[0, 4π]`.
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            domain: Domain::cube(dim, 0.0, 4.0 * PI),
        }
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    pub fn noise_std(&self) -> f64 {
        NOISE_STD
    }
}

impl SimulatorModel for OscillatoryModel {
    fn name(&self) -> &str {
        "oscillatory"
    }

    fn theta_dim(&self) -> usize {
        1
    }

    fn design_dim(&self) -> usize {
        self.dim
    }

    fn noise_dim(&self) -> usize {
        self.dim
    }

    fn domain(&self) -> &Domain {
        &self.domain
    }

    fn sample_prior(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        out[0] = rng.random_range(0.0..PI);
    }

    fn prior_density(&self, theta: &[f64]) -> f64 {
        if (0.0..=PI).contains(&theta[0]) {
            1.0 / PI
        } else {
            0.0
        }
    }

    /// Standard-normal draws; the path applies the 0.1 scale.
    fn sample_noise(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        for e in out.iter_mut() {
            *e = StandardNormal.sample(rng);
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
        for ((y, &t), &e) in out.iter_mut().zip(design).zip(noise) {
            *y = oscillatory_sample(theta[0], t, e);
        }
        Ok(())
    }

    fn has_gradients(&self) -> bool {
        true
    }

    fn jacobian(&self, theta: &[f64], design: &[f64], noise: &[f64]) -> Result<DMatrix<f64>> {
        check_path_dims(self, theta, design, noise, &vec![0.0; self.dim])?;
        let omega = theta[0];
        let mut jac = DMatrix::zeros(self.dim, self.dim);
        for (i, &t) in design.iter().enumerate() {
            jac[(i, i)] = omega * (omega * t).cos();
        }
        Ok(jac)
    }
}
