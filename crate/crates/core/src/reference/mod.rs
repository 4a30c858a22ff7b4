//! Reference mutual-information values: nested Monte Carlo over explicit
//! per-coordinate likelihoods and the closed form for the Gaussian linear model.

use nalgebra::{DMatrix, Matrix2};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::models::{LinearModel, LinearNoise, OscillatoryModel, PkModel, PkNoise, PkParams, SimulatorModel};

mod kde;

pub use kde::{kde_eval, kde_fit, BandwidthRule, KdeDensity, BANDWIDTH_FLOOR};

/// Samples behind the noise KDE of the Gaussian + Gamma linear model.
pub const NOISE_KDE_SAMPLES: usize = 50_000;
/// Nodes of the tabulated noise KDE.
pub const NOISE_KDE_TABLE: usize = 8192;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Density of the additive measurement noise of the linear model.
#[derive(Debug, Clone)]
pub enum NoiseDensity {
    Kde(KdeDensity),
    /// Exact zero-mean normal.
    Normal { std: f64 },
}

impl NoiseDensity {
    pub fn log_pdf(&self, x: f64) -> f64 {
        match self {
            NoiseDensity::Kde(k) => k.log_pdf(x),
            NoiseDensity::Normal { std } => {
                let z = x / std;
                -0.5 * z * z - std.ln() - LN_SQRT_2PI
            }
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.log_pdf(x).exp()
    }
}

/// Quantiles at which the noise KDE hands over to exponential tails, and the
/// inner quantiles fixing the tail slopes.
pub const NOISE_TAIL_QUANTILES: (f64, f64) = (0.001, 0.01);

/// Tabulated KDE of `ε + ν`, `ε ~ N(0, 1)`, `ν ~ Γ(shape 2, scale 2)`, with
/// exponential tails beyond the extreme quantiles.
pub fn linear_noise_kde(samples: usize, seed: u64) -> Result<KdeDensity> {
    let model = LinearModel::noisy(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<f64> = (0..samples)
        .map(|_| model.draw_noise(&mut rng).as_slice().iter().sum())
        .collect();
    let (outer, inner) = NOISE_TAIL_QUANTILES;
    kde_fit(&draws, BandwidthRule::Silverman)?
        .tabulated(NOISE_KDE_TABLE)
        .with_exponential_tails(outer, inner)
}

/// Noise density matching a linear model variant.
pub fn linear_noise_density(model: &LinearModel, seed: u64) -> Result<NoiseDensity> {
    match model.noise() {
        LinearNoise::GaussianGamma => Ok(NoiseDensity::Kde(linear_noise_kde(NOISE_KDE_SAMPLES, seed)?)),
        LinearNoise::Gaussian { std } => Ok(NoiseDensity::Normal { std }),
    }
}

/// `p(y_j | d_j, θ) = p_noise(y_j − θ0 − θ1 d_j)`.
pub fn linear_likelihood(y: f64, d: f64, theta: &[f64], noise: &NoiseDensity) -> f64 {
    noise.pdf(y - theta[0] - theta[1] * d)
}

/// `N(y; f, f²·σ_ε² + σ_ν²)` with `f` the noise-free concentration at `t`,
/// under the default [`PkNoise`].
pub fn pk_likelihood(y: f64, t: f64, theta: &[f64]) -> Result<f64> {
    pk_likelihood_with(y, t, theta, &PkNoise::default())
}

pub fn pk_likelihood_with(y: f64, t: f64, theta: &[f64], noise: &PkNoise) -> Result<f64> {
    Ok(pk_log_likelihood(y, t, theta, noise)?.exp())
}

fn pk_log_likelihood(y: f64, t: f64, theta: &[f64], noise: &PkNoise) -> Result<f64> {
    let f = PkParams::from_slice(theta).concentration(t)?;
    let var = noise.observation_variance(f);
    Ok(-0.5 * (y - f).powi(2) / var - 0.5 * var.ln() - LN_SQRT_2PI)
}

/// Likelihood factorised over design coordinates.
pub trait CoordinateLikelihood: Sync {
    fn log_density(&self, y: f64, d: f64, theta: &[f64]) -> Result<f64>;
}

#[derive(Debug, Clone)]
pub struct LinearLikelihood {
    pub noise: NoiseDensity,
}

impl CoordinateLikelihood for LinearLikelihood {
    fn log_density(&self, y: f64, d: f64, theta: &[f64]) -> Result<f64> {
        Ok(self.noise.log_pdf(y - theta[0] - theta[1] * d))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PkLikelihood {
    pub noise: PkNoise,
}

impl PkLikelihood {
    pub fn for_model(model: &PkModel) -> Self {
        Self { noise: model.noise() }
    }
}

impl CoordinateLikelihood for PkLikelihood {
    fn log_density(&self, y: f64, t: f64, theta: &[f64]) -> Result<f64> {
        pk_log_likelihood(y, t, theta, &self.noise)
    }
}

/// `N(y; sin(ω t), σ²)` for the oscillatory model.
#[derive(Debug, Clone, Copy)]
pub struct OscillatoryLikelihood {
    pub noise_std: f64,
}

impl OscillatoryLikelihood {
    pub fn for_model(model: &OscillatoryModel) -> Self {
        Self {
            noise_std: model.noise_std(),
        }
    }
}

impl CoordinateLikelihood for OscillatoryLikelihood {
    fn log_density(&self, y: f64, t: f64, theta: &[f64]) -> Result<f64> {
        let z = (y - (theta[0] * t).sin()) / self.noise_std;
        Ok(-0.5 * z * z - self.noise_std.ln() - LN_SQRT_2PI)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NestedMcConfig {
    /// Outer samples `N`.
    pub n_outer: usize,
    /// Inner samples `M`, shared by all outer samples.
    pub n_inner: usize,
    pub seed: u64,
}

impl Default for NestedMcConfig {
    fn default() -> Self {
        Self {
            n_outer: 5000,
            n_inner: 500,
            seed: 0,
        }
    }
}

impl NestedMcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_outer == 0 || self.n_inner == 0 {
            return Err(Error::Config(format!(
                "nested Monte Carlo needs N, M >= 1, got N = {}, M = {}",
                self.n_outer, self.n_inner
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NestedMcEstimate {
    pub value: f64,
    /// Standard error over the outer samples.
    pub std_error: f64,
}

fn joint_log_likelihood(
    likelihood: &dyn CoordinateLikelihood,
    y: &[f64],
    design: &[f64],
    theta: &[f64],
) -> Result<f64> {
    let mut total = 0.0;
    for (&yj, &dj) in y.iter().zip(design) {
        total += likelihood.log_density(yj, dj, theta)?;
    }
    Ok(total)
}

/// `(1/N) Σ_i [ log p(y_i | θ_i) − log (1/M) Σ_s p(y_i | θ_s) ]` with
/// `y_i` simulated at `θ_i` and one shared inner set `θ_1..θ_M`.
pub fn nested_mc_mi(
    model: &dyn SimulatorModel,
    likelihood: &dyn CoordinateLikelihood,
    design: &[f64],
    cfg: &NestedMcConfig,
) -> Result<NestedMcEstimate> {
    cfg.validate()?;
    check_len("design", model.design_dim(), design.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let inner: Vec<Vec<f64>> = (0..cfg.n_inner).map(|_| model.draw_prior(&mut rng)).collect();
    let outer = (0..cfg.n_outer)
        .map(|_| {
            let theta = model.draw_prior(&mut rng as &mut dyn RngCore);
            let y = model.simulate(&theta, design, &mut rng)?;
            Ok((theta, y))
        })
        .collect::<Result<Vec<_>>>()?;

    let ln_m = (cfg.n_inner as f64).ln();
    let terms = outer
        .par_iter()
        .enumerate()
        .map(|(i, (theta, y))| {
            let own = joint_log_likelihood(likelihood, y, design, theta)?;
            if !own.is_finite() {
                return Err(Error::Numerical(format!(
                    "outer sample {i}: log-likelihood {own} at its own parameters {theta:?}"
                )));
            }
            let logs = inner
                .iter()
                .map(|ts| joint_log_likelihood(likelihood, y, design, ts))
                .collect::<Result<Vec<f64>>>()?;
            let marginal = log_sum_exp(&logs) - ln_m;
            if !marginal.is_finite() {
                return Err(Error::Numerical(format!(
                    "outer sample {i}: inner marginal log-likelihood is {marginal}"
                )));
            }
            Ok(own - marginal)
        })
        .collect::<Result<Vec<f64>>>()?;

    let n = terms.len() as f64;
    let value = terms.iter().sum::<f64>() / n;
    let std_error = if terms.len() > 1 {
        (terms.iter().map(|t| (t - value).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(NestedMcEstimate { value, std_error })
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `½ ln det(I + X Σ Xᵀ / σ²)` with design-matrix rows `[1, d_i]`.
pub fn analytic_mi_gaussian_linear(design: &[f64], prior_cov: &Matrix2<f64>, noise_var: f64) -> Result<f64> {
    if !(noise_var > 0.0 && noise_var.is_finite()) {
        return Err(Error::Numerical(format!("noise variance must be positive, got {noise_var}")));
    }
    if design.is_empty() {
        return Err(Error::Input("design must have at least one coordinate".into()));
    }
    let sym = (prior_cov - prior_cov.transpose()).abs().max();
    if sym > 1e-12 * prior_cov.abs().max().max(1.0) || !prior_cov.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!("prior covariance is not symmetric: {prior_cov}")));
    }
    let eig = prior_cov.symmetric_eigenvalues();
    if eig.min() < -1e-12 * eig.abs().max().max(1.0) {
        return Err(Error::Numerical(format!("prior covariance is not positive semi-definite: {prior_cov}")));
    }
    let x = DMatrix::from_fn(design.len(), 2, |i, j| if j == 0 { 1.0 } else { design[i] });
    let cov = DMatrix::from_fn(2, 2, |i, j| prior_cov[(i, j)]);
    let mut m = &x * cov * x.transpose() / noise_var;
    for i in 0..design.len() {
        m[(i, i)] += 1.0;
    }
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::Numerical("I + XΣXᵀ/σ² is not positive definite".into()))?;
    Ok(chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{normal_pdf, LinearPrior};
    use proptest::prelude::*;
    use rand::Rng;

    fn half_ln_910() -> f64 {
        0.5 * 910f64.ln()
    }

    #[test]
    fn analytic_scalar_case() {
        let mi = analytic_mi_gaussian_linear(&[10.0], &Matrix2::from_diagonal_element(9.0), 1.0).unwrap();
        assert!((mi - half_ln_910()).abs() < 1e-12);
        assert!((mi - 3.407).abs() < 1e-3);
        // Two-coordinate check against the 2×2 determinant identity det(I + ΣXᵀX/σ²).
        let d = [1.5, -4.0];
        let s = Matrix2::new(2.0, 0.3, 0.3, 1.0);
        let xtx = Matrix2::new(2.0, d[0] + d[1], d[0] + d[1], d[0] * d[0] + d[1] * d[1]);
        let expected = 0.5 * (Matrix2::<f64>::identity() + s * xtx / 0.5).determinant().ln();
        let mi = analytic_mi_gaussian_linear(&d, &s, 0.5).unwrap();
        assert!((mi - expected).abs() < 1e-12);
    }

    #[test]
    fn analytic_limits_and_errors() {
        let tiny = analytic_mi_gaussian_linear(&[3.0, 4.0], &Matrix2::from_diagonal_element(1e-12), 1.0).unwrap();
        assert!(tiny.abs() < 1e-10);
        assert_eq!(analytic_mi_gaussian_linear(&[3.0], &Matrix2::zeros(), 1.0).unwrap(), 0.0);
        assert!(analytic_mi_gaussian_linear(&[1.0], &Matrix2::identity(), 0.0).is_err());
        assert!(analytic_mi_gaussian_linear(&[1.0], &Matrix2::new(1.0, 2.0, 2.0, 1.0), 1.0).is_err());
        assert!(analytic_mi_gaussian_linear(&[1.0], &Matrix2::new(1.0, 0.5, 0.0, 1.0), 1.0).is_err());
    }

    proptest! {
        #[test]
        fn analytic_is_permutation_invariant(mut d in prop::collection::vec(-10.0..10.0f64, 1..8), seed in any::<u64>()) {
            let s = Matrix2::new(9.0, 1.0, 1.0, 4.0);
            let a = analytic_mi_gaussian_linear(&d, &s, 1.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(d.as_mut_slice(), &mut rng);
            let b = analytic_mi_gaussian_linear(&d, &s, 1.0).unwrap();
            prop_assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
        }

        #[test]
        fn linear_likelihood_shift_invariance(y in -50.0..50.0f64, d in -10.0..10.0f64, t0 in -10.0..10.0f64, t1 in -5.0..5.0f64, c in -20.0..20.0f64) {
            let noise = NoiseDensity::Normal { std: 1.3 };
            let a = linear_likelihood(y + c, d, &[t0 + c, t1], &noise);
            let b = linear_likelihood(y, d, &[t0, t1], &noise);
            let r1 = (y + c) - (t0 + c) - t1 * d;
            let r0 = y - t0 - t1 * d;
            // Bitwise equal whenever the shifted residual rounds to the same value.
            if r1 == r0 {
                prop_assert_eq!(a, b);
            } else {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn kde_likelihood_shift_invariance_and_mode() {
        let k = linear_noise_kde(5000, 1).unwrap();
        let noise = NoiseDensity::Kde(k.clone());
        let a = linear_likelihood(4.0, 2.0, &[1.0, 0.5], &noise);
        let b = linear_likelihood(4.0 + 0.25, 2.0, &[1.25, 0.5], &noise);
        assert_eq!(a, b);
        let grid: Vec<f64> = (0..4000).map(|i| -5.0 + i as f64 * 0.01).collect();
        let mode = grid.iter().copied().max_by(|x, y| k.pdf(*x).total_cmp(&k.pdf(*y))).unwrap();
        let at_mode = linear_likelihood(1.0 + 2.0 * 0.5 + mode, 2.0, &[1.0, 0.5], &noise);
        for &r in &grid {
            assert!(linear_likelihood(2.0 + r, 2.0, &[1.0, 0.5], &noise) <= at_mode);
        }
    }

    #[test]
    fn normal_stub_matches_closed_form() {
        let noise = NoiseDensity::Normal { std: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let (y, d, t0, t1): (f64, f64, f64, f64) =
                (rng.random_range(-20.0..20.0), rng.random_range(-10.0..10.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let expected = normal_pdf(y, t0 + t1 * d, 1.0);
            assert!((linear_likelihood(y, d, &[t0, t1], &noise) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn pk_likelihood_points() {
        let theta = [1.5, 0.15, 15.0];
        let narrow = PkNoise::NARROW;
        let at_zero = pk_likelihood_with(0.3, 0.0, &theta, &narrow).unwrap();
        assert!((at_zero - normal_pdf(0.3, 0.0, 0.1)).abs() < 1e-12);
        let t = 0.551;
        let f = PkParams::from_slice(&theta).concentration(t).unwrap();
        let peak = pk_likelihood_with(f, t, &theta, &narrow).unwrap();
        let expected = 1.0 / (2.0 * std::f64::consts::PI * (f * f * 1e-4 + 0.01)).sqrt();
        assert!((peak - expected).abs() < 1e-12 * expected);

        let wide = pk_likelihood(f, t, &theta).unwrap();
        let expected = 1.0 / (2.0 * std::f64::consts::PI * (f * f * 0.01 + 0.1)).sqrt();
        assert!((wide - expected).abs() < 1e-12 * expected);
        let at_zero = pk_likelihood(0.3, 0.0, &theta).unwrap();
        assert!((at_zero - normal_pdf(0.3, 0.0, 0.1f64.sqrt())).abs() < 1e-12);
        assert!(matches!(pk_likelihood(1.0, 1.0, &[0.2, 0.2, 10.0]), Err(Error::Singular(_))));
    }

    #[test]
    fn pk_likelihood_matches_simulation_histogram() {
        for noise in [PkNoise::NARROW, PkNoise::WIDE] {
            pk_histogram_check(noise);
        }
    }

    fn pk_histogram_check(noise: PkNoise) {
        let model = PkModel::new(1).with_noise(noise).unwrap();
        let theta = [1.5, 0.15, 15.0];
        let t = 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ys: Vec<f64> = (0..1_000_000).map(|_| model.simulate(&theta, &[t], &mut rng).unwrap()[0]).collect();
        let f = PkParams::from_slice(&theta).concentration(t).unwrap();
        let sd = noise.observation_variance(f).sqrt();
        let width = sd / 10.0;
        let bins = 100;
        let lo = f - 5.0 * sd;
        let mut counts = vec![0usize; bins];
        for y in ys {
            let b = ((y - lo) / width).floor();
            if b >= 0.0 && (b as usize) < bins {
                counts[b as usize] += 1;
            }
        }
        let peak = pk_likelihood_with(f, t, &theta, &noise).unwrap();
        let worst = counts
            .iter()
            .enumerate()
            .map(|(b, &c)| {
                let centre = lo + (b as f64 + 0.5) * width;
                let hist = c as f64 / (1e6 * width);
                (hist - pk_likelihood_with(centre, t, &theta, &noise).unwrap()).abs() / peak
            })
            .fold(0.0, f64::max);
        // Sup-norm on the density scaled to a unit peak.
        assert!(worst < 0.05, "worst relative bin error {worst}");
    }

    #[test]
    fn oscillatory_likelihood_is_a_normal_density() {
        let lik = OscillatoryLikelihood::for_model(&OscillatoryModel::new(1));
        let (omega, t): (f64, f64) = (1.3, 2.0);
        let mean = (omega * t).sin();
        for y in [-0.4, mean, 1.1] {
            let got = lik.log_density(y, t, &[omega]).unwrap().exp();
            assert!((got - normal_pdf(y, mean, 0.1)).abs() < 1e-12);
        }
    }

    #[test]
    fn point_mass_prior_has_zero_mi() {
        let model = LinearModel::gaussian(1).with_prior(LinearPrior {
            mean: [1.0, 2.0],
            std: [0.0, 0.0],
        });
        let lik = LinearLikelihood {
            noise: NoiseDensity::Normal { std: 1.0 },
        };
        let cfg = NestedMcConfig {
            n_outer: 2000,
            n_inner: 100,
            seed: 3,
        };
        let est = nested_mc_mi(&model, &lik, &[5.0], &cfg).unwrap();
        assert!(est.value.abs() < 0.01, "{est:?}");
    }

    #[test]
    fn nested_mc_converges_to_closed_form() {
        let model = LinearModel::gaussian(1);
        let lik = LinearLikelihood {
            noise: NoiseDensity::Normal { std: 1.0 },
        };
        let truth = half_ln_910();
        // The log of the inner mean biases the estimate upwards; the bias
        // shrinks as M grows.
        let coarse = NestedMcConfig {
            n_outer: 2000,
            n_inner: 50,
            seed: 1,
        };
        let fine = NestedMcConfig {
            n_inner: 20_000,
            ..coarse
        };
        let a = nested_mc_mi(&model, &lik, &[10.0], &coarse).unwrap();
        let b = nested_mc_mi(&model, &lik, &[10.0], &fine).unwrap();
        assert!(a.value > b.value, "{a:?} {b:?}");
        assert!((b.value / truth - 1.0).abs() < 0.02, "{b:?} vs {truth}");
    }

    #[test]
    fn nested_mc_is_deterministic_and_validates() {
        let model = LinearModel::gaussian(2);
        let lik = LinearLikelihood {
            noise: NoiseDensity::Normal { std: 1.0 },
        };
        let cfg = NestedMcConfig {
            n_outer: 300,
            n_inner: 50,
            seed: 9,
        };
        let a = nested_mc_mi(&model, &lik, &[1.0, -3.0], &cfg).unwrap();
        let b = nested_mc_mi(&model, &lik, &[1.0, -3.0], &cfg).unwrap();
        assert_eq!(a, b);
        assert!(nested_mc_mi(&model, &lik, &[1.0], &cfg).is_err());
        let bad = NestedMcConfig { n_inner: 0, ..cfg };
        assert!(matches!(nested_mc_mi(&model, &lik, &[1.0, 2.0], &bad), Err(Error::Config(_))));
    }

    struct Broken;

    impl CoordinateLikelihood for Broken {
        fn log_density(&self, _y: f64, _d: f64, _theta: &[f64]) -> Result<f64> {
            Ok(f64::NAN)
        }
    }

    #[test]
    fn nested_mc_reports_offending_sample() {
        let model = LinearModel::gaussian(1);
        let cfg = NestedMcConfig {
            n_outer: 10,
            n_inner: 5,
            seed: 0,
        };
        let err = nested_mc_mi(&model, &Broken, &[1.0], &cfg).unwrap_err();
        assert!(err.to_string().contains("outer sample 0"), "{err}");
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
    }
}
