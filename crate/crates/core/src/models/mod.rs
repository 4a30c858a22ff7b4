//! Simulator catalog.
//!
//! Every model is an implicit model described by its sampling path
//! `y = h(noise; θ, d)`. The base-noise realisation is reified as a flat
//! slice (a [`NoiseDraw`]) so that the exact same draw can be replayed
//! through [`SimulatorModel::sample_path`] and the design Jacobian.

use nalgebra::DMatrix;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

mod linear;
mod oscillatory;
mod pk;

pub use linear::{
    gaussian_linear_jacobian, gaussian_linear_sample, linear_jacobian, linear_sample,
    LinearModel, LinearNoise, LinearPrior, GAMMA_SCALE, GAMMA_SHAPE,
};
#[cfg(test)]
pub(crate) use linear::normal_pdf;
pub use oscillatory::{oscillatory_sample, OscillatoryModel};
pub use pk::{pk_jacobian, pk_prior_sample, pk_sample, PkModel, PkNoise, PkParams, PK_DOSE};

/// Axis-aligned box of admissible designs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Domain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let domain = Self { lower, upper };
        domain.validate()?;
        Ok(domain)
    }

    /// The same interval `[lo, hi]` on each of `dim` coordinates.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        Self {
            lower: vec![lo; dim],
            upper: vec![hi; dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_len("domain bounds", self.lower.len(), self.upper.len())?;
        if self.lower.is_empty() {
            return Err(Error::Config("design domain must have at least one coordinate".into()));
        }
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::Config(format!(
                    "domain coordinate {i} must satisfy finite lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, d: &[f64]) -> bool {
        d.len() == self.dim()
            && d
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (lo, hi))| *x >= *lo && *x <= *hi)
    }

    pub fn sample_uniform(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| rng.random_range(*lo..=*hi))
            .collect()
    }
}

/// An owned base-noise realisation; its layout is defined by the model that
/// drew it (see each model's `noise_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw(pub Vec<f64>);

impl NoiseDraw {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// A simulator-defined statistical model with a reparameterised sampling path.
pub trait SimulatorModel: Send + Sync {
    fn name(&self) -> &str;

    fn theta_dim(&self) -> usize;

    fn design_dim(&self) -> usize;

    fn data_dim(&self) -> usize {
        self.design_dim()
    }

    /// Length of one base-noise realisation.
    fn noise_dim(&self) -> usize;

    fn domain(&self) -> &Domain;

    fn sample_prior(&self, rng: &mut dyn RngCore, out: &mut [f64]);

    /// Prior density at `theta` (zero outside the support).
    fn prior_density(&self, theta: &[f64]) -> f64;

    fn sample_noise(&self, rng: &mut dyn RngCore, out: &mut [f64]);

    /// Deterministic map from a noise draw to data.
    fn sample_path(
        &self,
        theta: &[f64],
        design: &[f64],
        noise: &[f64],
        out: &mut [f64],
    ) -> Result<()>;

    fn has_gradients(&self) -> bool {
        false
    }

    /// `J[i][j] = ∂y_i/∂d_j` along the path of the given noise draw.
    fn jacobian(&self, _theta: &[f64], _design: &[f64], _noise: &[f64]) -> Result<DMatrix<f64>> {
        Err(Error::NoGradients(self.name().to_string()))
    }

    /// Accumulates `Jᵀ v` into `out` (length `design_dim`).
    fn accumulate_jacobian_transpose(
        &self,
        theta: &[f64],
        design: &[f64],
        noise: &[f64],
        v: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        let jac = self.jacobian(theta, design, noise)?;
        for j in 0..jac.ncols() {
            out[j] += (0..jac.nrows()).map(|i| jac[(i, j)] * v[i]).sum::<f64>();
        }
        Ok(())
    }

    fn draw_prior(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let mut theta = vec![0.0; self.theta_dim()];
        self.sample_prior(rng, &mut theta);
        theta
    }

    fn draw_noise(&self, rng: &mut dyn RngCore) -> NoiseDraw {
        let mut noise = vec![0.0; self.noise_dim()];
        self.sample_noise(rng, &mut noise);
        NoiseDraw(noise)
    }

    /// Convenience: one fresh simulation at `(theta, design)`.
    fn simulate(&self, theta: &[f64], design: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let noise = self.draw_noise(rng);
        let mut y = vec![0.0; self.data_dim()];
        self.sample_path(theta, design, noise.as_slice(), &mut y)?;
        Ok(y)
    }
}

/// Hides the design Jacobian of the wrapped model, forcing the gradient-free
/// optimisation path.
#[derive(Debug, Clone)]
pub struct GradientFree<M>(pub M);

impl<M: SimulatorModel> SimulatorModel for GradientFree<M> {
    fn name(&self) -> &str {
        self.0.name()
    }
    fn theta_dim(&self) -> usize {
        self.0.theta_dim()
    }
    fn design_dim(&self) -> usize {
        self.0.design_dim()
    }
    fn data_dim(&self) -> usize {
        self.0.data_dim()
    }
    fn noise_dim(&self) -> usize {
        self.0.noise_dim()
    }
    fn domain(&self) -> &Domain {
        self.0.domain()
    }
    fn sample_prior(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        self.0.sample_prior(rng, out)
    }
    fn prior_density(&self, theta: &[f64]) -> f64 {
        self.0.prior_density(theta)
    }
    fn sample_noise(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        self.0.sample_noise(rng, out)
    }
    fn sample_path(
        &self,
        theta: &[f64],
        design: &[f64],
        noise: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        self.0.sample_path(theta, design, noise, out)
    }
}

/// Gamma draw under the shape–scale convention (mean `shape · scale`).
pub fn gamma_sample(shape: f64, scale: f64, rng: &mut dyn RngCore) -> Result<f64> {
    let dist = rand_distr::Gamma::new(shape, scale)
        .map_err(|e| Error::Input(format!("gamma(shape {shape}, scale {scale}): {e}")))?;
    Ok(rng.sample(dist))
}

pub(crate) fn check_path_dims(
    model: &dyn SimulatorModel,
    theta: &[f64],
    design: &[f64],
    noise: &[f64],
    out: &[f64],
) -> Result<()> {
    check_len("theta", model.theta_dim(), theta.len())?;
    check_len("design", model.design_dim(), design.len())?;
    check_len("noise draw", model.noise_dim(), noise.len())?;
    check_len("data output", model.data_dim(), out.len())
}
