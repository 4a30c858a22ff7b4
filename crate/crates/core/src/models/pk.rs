//! One-compartment oral-dose pharmacokinetic model, one blood sample per
//! patient at design time `t_i` (hours).
//!
//! Latent concentration `z(t) = (D/V)·k_a/(k_a − k_e)·[e^{−k_e t} − e^{−k_a t}]·(1 + ε)`,
//! observed as `y(t) = z(t) + ν`. By default `ε` and `ν` have variances 0.01 and
//! 0.1; [`PkNoise::NARROW`] uses standard deviations 0.01 and 0.1 instead.

use nalgebra::DMatrix;
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::{check_path_dims, Domain, SimulatorModel};
use crate::error::{Error, Result};

/// Administered dose constant.
pub const PK_DOSE: f64 = 400.0;

const PRIOR_LOG_MEAN: [f64; 3] = [0.0, -std::f64::consts::LN_10, 2.995_732_273_553_991];
const PRIOR_LOG_VAR: f64 = 0.05;

/// Standard deviations of the multiplicative (`ε`) and additive (`ν`) noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PkNoise {
    pub mult_std: f64,
    pub add_std: f64,
}

impl PkNoise {
    /// `ε ~ N(0, 0.01)`, `ν ~ N(0, 0.1)` with the second argument a variance.
    pub const WIDE: PkNoise = PkNoise {
        mult_std: 0.1,
        add_std: 0.316_227_766_016_837_94,
    };
    /// `ε ~ N(0, 0.01²)`, `ν ~ N(0, 0.1²)`.
    pub const NARROW: PkNoise = PkNoise {
        mult_std: 0.01,
        add_std: 0.1,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.mult_std >= 0.0 && self.add_std > 0.0 && self.mult_std.is_finite() && self.add_std.is_finite()) {
            return Err(Error::Input(format!(
                "pharmacokinetic noise needs mult_std >= 0 and add_std > 0, got ({}, {})",
                self.mult_std, self.add_std
            )));
        }
        Ok(())
    }

    /// Variance of `y` given the noise-free concentration `f`.
    pub fn observation_variance(&self, f: f64) -> f64 {
        f * f * self.mult_std * self.mult_std + self.add_std * self.add_std
    }
}

impl Default for PkNoise {
    fn default() -> Self {
        Self::WIDE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PkParams {
    /// Absorption rate (1/hour).
    pub ka: f64,
    /// Elimination rate (1/hour).
    pub ke: f64,
    /// Volume of distribution (litres).
    pub v: f64,
}

impl PkParams {
    pub fn new(ka: f64, ke: f64, v: f64) -> Result<Self> {
        if !(ka > ke && ke > 0.0 && v > 0.0) {
            return Err(Error::Input(format!(
                "pharmacokinetic parameters need k_a > k_e > 0 and V > 0, got ({ka}, {ke}, {v})"
            )));
        }
        Ok(Self { ka, ke, v })
    }

    pub fn from_slice(theta: &[f64]) -> Self {
        Self {
            ka: theta[0],
            ke: theta[1],
            v: theta[2],
        }
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.ka, self.ke, self.v]
    }

    fn amplitude(&self) -> Result<f64> {
        let gap = self.ka - self.ke;
        if gap.abs() <= f64::EPSILON * self.ka.abs().max(self.ke.abs()) {
            return Err(Error::Singular(format!(
                "k_a == k_e ({}) makes the concentration curve undefined",
                self.ka
            )));
        }
        Ok(PK_DOSE / self.v * self.ka / gap)
    }

    /// Noise-free concentration `f(t, θ)`.
    pub fn concentration(&self, t: f64) -> Result<f64> {
        Ok(self.amplitude()? * ((-self.ke * t).exp() - (-self.ka * t).exp()))
    }

    /// `∂f/∂t`.
    pub fn concentration_slope(&self, t: f64) -> Result<f64> {
        Ok(self.amplitude()? * (-self.ke * (-self.ke * t).exp() + self.ka * (-self.ka * t).exp()))
    }

    /// Time of maximal noise-free concentration.
    pub fn peak_time(&self) -> f64 {
        (self.ka / self.ke).ln() / (self.ka - self.ke)
    }
}

/// `f(t_i)(1 + ε_i) + ν_i` per coordinate.
pub fn pk_sample(theta: PkParams, times: &[f64], eps: &[f64], nu: &[f64]) -> Result<Vec<f64>> {
    times
        .iter()
        .zip(eps.iter().zip(nu))
        .map(|(&t, (e, n))| Ok(theta.concentration(t)? * (1.0 + e) + n))
        .collect()
}

/// Diagonal `∂y_i/∂t_i = f'(t_i)(1 + ε_i)`.
pub fn pk_jacobian(theta: PkParams, times: &[f64], eps: &[f64]) -> Result<DMatrix<f64>> {
    let n = times.len();
    let mut jac = DMatrix::zeros(n, n);
    for (i, (&t, e)) in times.iter().zip(eps).enumerate() {
        jac[(i, i)] = theta.concentration_slope(t)? * (1.0 + e);
    }
    Ok(jac)
}

fn draw_log_normal(rng: &mut dyn RngCore) -> [f64; 3] {
    let sd = PRIOR_LOG_VAR.sqrt();
    let mut out = [0.0; 3];
    for (o, m) in out.iter_mut().zip(PRIOR_LOG_MEAN) {
        let z: f64 = StandardNormal.sample(rng);
        *o = (m + sd * z).exp();
    }
    out
}

/// Unconstrained log-normal draw, before the `k_a > k_e` rejection step.
pub fn pk_prior_sample_unconstrained(rng: &mut dyn RngCore) -> PkParams {
    let [ka, ke, v] = draw_log_normal(rng);
    PkParams { ka, ke, v }
}

/// Log-normal prior conditioned on `k_a > k_e` by rejection.
pub fn pk_prior_sample(rng: &mut dyn RngCore) -> PkParams {
    loop {
        let p = pk_prior_sample_unconstrained(rng);
        if p.ka > p.ke {
            return p;
        }
    }
}

#[derive(Debug, Clone)]
pub struct PkModel {
    dim: usize,
    domain: Domain,
    noise: PkNoise,
    /// P(k_a > k_e) under the unconstrained prior.
    acceptance: f64,
}

impl PkModel {
    /// `dim` patients, sampling times in `[0, 24]` hours.
    pub fn new(dim: usize) -> Self {
        // log k_a − log k_e ~ N(ln 10, 2·0.05)
        let z = (PRIOR_LOG_MEAN[0] - PRIOR_LOG_MEAN[1]) / (2.0 * PRIOR_LOG_VAR).sqrt();
        Self {
            dim,
            domain: Domain::cube(dim, 0.0, 24.0),
            noise: PkNoise::default(),
            acceptance: 0.5 * erfc(-z / std::f64::consts::SQRT_2),
        }
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    pub fn with_noise(mut self, noise: PkNoise) -> Result<Self> {
        noise.validate()?;
        self.noise = noise;
        Ok(self)
    }

    pub fn noise(&self) -> PkNoise {
        self.noise
    }
}

impl SimulatorModel for PkModel {
    fn name(&self) -> &str {
        "pk"
    }

    fn theta_dim(&self) -> usize {
        3
    }

    fn design_dim(&self) -> usize {
        self.dim
    }

    fn noise_dim(&self) -> usize {
        2 * self.dim
    }

    fn domain(&self) -> &Domain {
        &self.domain
    }

    fn sample_prior(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        let p = pk_prior_sample(rng);
        out.copy_from_slice(&[p.ka, p.ke, p.v]);
    }

    fn prior_density(&self, theta: &[f64]) -> f64 {
        let p = PkParams::from_slice(theta);
        if !(p.ka > p.ke && p.ke > 0.0 && p.v > 0.0) {
            return 0.0;
        }
        let sd = PRIOR_LOG_VAR.sqrt();
        let norm = 1.0 / (sd * (2.0 * std::f64::consts::PI).sqrt());
        let density: f64 = theta
            .iter()
            .zip(PRIOR_LOG_MEAN)
            .map(|(&x, m)| {
                let z = (x.ln() - m) / sd;
                norm * (-0.5 * z * z).exp() / x
            })
            .product();
        density / self.acceptance
    }

    fn sample_noise(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        let (eps, nu) = out.split_at_mut(self.dim);
        for e in eps.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *e = self.noise.mult_std * z;
        }
        for n in nu.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *n = self.noise.add_std * z;
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
        let p = PkParams::from_slice(theta);
        let (eps, nu) = noise.split_at(self.dim);
        for i in 0..self.dim {
            out[i] = p.concentration(design[i])? * (1.0 + eps[i]) + nu[i];
        }
        Ok(())
    }

    fn has_gradients(&self) -> bool {
        true
    }

    fn jacobian(&self, theta: &[f64], design: &[f64], noise: &[f64]) -> Result<DMatrix<f64>> {
        check_path_dims(self, theta, design, noise, &vec![0.0; self.dim])?;
        pk_jacobian(PkParams::from_slice(theta), design, &noise[..self.dim])
    }

    fn accumulate_jacobian_transpose(
        &self,
        theta: &[f64],
        design: &[f64],
        noise: &[f64],
        v: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        let p = PkParams::from_slice(theta);
        for i in 0..self.dim {
            out[i] += p.concentration_slope(design[i])? * (1.0 + noise[i]) * v[i];
        }
        Ok(())
    }
}
