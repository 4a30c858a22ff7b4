//! Gaussian-process regression with a Matérn-5/2 kernel and a constant mean.

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest observation-noise variance the fit may select.
pub const NOISE_FLOOR: f64 = 1e-6;
const MAX_JITTER: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelHyper {
    /// σ², the kernel value at zero distance.
    pub signal_var: f64,
    /// Shared lengthscale ℓ.
    pub lengthscale: f64,
}

impl KernelHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.signal_var > 0.0 && self.lengthscale > 0.0)
            || !self.signal_var.is_finite()
            || !self.lengthscale.is_finite()
        {
            return Err(Error::Input(format!(
                "kernel hyperparameters must be positive, got σ² = {}, ℓ = {}",
                self.signal_var, self.lengthscale
            )));
        }
        Ok(())
    }
}

/// `σ²(1 + √5 r/ℓ + 5r²/(3ℓ²)) exp(−√5 r/ℓ)` with `r = |x1 − x2|`.
pub fn matern52(x1: &[f64], x2: &[f64], hyper: &KernelHyper) -> Result<f64> {
    hyper.validate()?;
    if x1.len() != x2.len() {
        return Err(Error::Dimension {
            what: "kernel inputs",
            expected: x1.len(),
            actual: x2.len(),
        });
    }
    Ok(matern52_unchecked(x1, x2, hyper))
}

fn matern52_unchecked(x1: &[f64], x2: &[f64], hyper: &KernelHyper) -> f64 {
    let r2: f64 = x1.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum();
    let s = 5.0f64.sqrt() * r2.sqrt() / hyper.lengthscale;
    hyper.signal_var * (1.0 + s + s * s / 3.0) * (-s).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpFitConfig {
    /// Nelder–Mead starts for the marginal-likelihood search.
    pub restarts: usize,
    pub max_iters: u64,
    pub seed: u64,
}

impl Default for GpFitConfig {
    fn default() -> Self {
        Self {
            restarts: 8,
            max_iters: 300,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GaussianProcess {
    x: Vec<Vec<f64>>,
    f: Vec<f64>,
    mean: f64,
    hyper: KernelHyper,
    noise_var: f64,
    jitter: f64,
    chol: Cholesky<f64, Dyn>,
    /// `(K + (noise + jitter) I)⁻¹ (f − mean)`.
    alpha: DVector<f64>,
    log_marginal: f64,
}

impl GaussianProcess {
    /// Conditions on `(x, f)` with fixed hyperparameters; the prior mean is
    /// the sample mean of `f`.
    pub fn with_hyper(
        x: Vec<Vec<f64>>,
        f: Vec<f64>,
        hyper: KernelHyper,
        noise_var: f64,
    ) -> Result<Self> {
        hyper.validate()?;
        check_observations(&x, &f)?;
        if !(noise_var >= 0.0) {
            return Err(Error::Input(format!("noise variance must be >= 0, got {noise_var}")));
        }
        let mean = f.iter().sum::<f64>() / f.len() as f64;
        let centred = DVector::from_iterator(f.len(), f.iter().map(|v| v - mean));
        let kernel = kernel_matrix(&x, &hyper);
        let (chol, jitter) = factorize(&kernel, noise_var)?;
        if jitter > 0.0 {
            log::info!("kernel matrix needed jitter {jitter:.1e}");
        }
        let alpha = chol.solve(&centred);
        let log_marginal = log_marginal_from(&chol, &centred, &alpha);
        Ok(Self {
            x,
            f,
            mean,
            hyper,
            noise_var,
            jitter,
            chol,
            alpha,
            log_marginal,
        })
    }

    pub fn hyper(&self) -> &KernelHyper {
        &self.hyper
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    /// Diagonal jitter added on top of the noise variance (0 if none was needed).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn prior_mean(&self) -> f64 {
        self.mean
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal
    }

    pub fn observations(&self) -> (&[Vec<f64>], &[f64]) {
        (&self.x, &self.f)
    }

    pub fn dim(&self) -> usize {
        self.x[0].len()
    }
}

fn check_observations(x: &[Vec<f64>], f: &[f64]) -> Result<()> {
    if x.len() != f.len() {
        return Err(Error::Dimension {
            what: "GP observations",
            expected: x.len(),
            actual: f.len(),
        });
    }
    if x.is_empty() {
        return Err(Error::Input("GP needs at least one observation".into()));
    }
    let dim = x[0].len();
    if let Some(row) = x.iter().find(|row| row.len() != dim) {
        return Err(Error::Dimension {
            what: "GP input row",
            expected: dim,
            actual: row.len(),
        });
    }
    if let Some(i) = f.iter().position(|v| !v.is_finite()) {
        return Err(Error::Input(format!("GP observation {i} is not finite ({})", f[i])));
    }
    Ok(())
}

fn kernel_matrix(x: &[Vec<f64>], hyper: &KernelHyper) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| matern52_unchecked(&x[i], &x[j], hyper))
}

/// Cholesky of `K + noise I`, escalating diagonal jitter until it succeeds.
fn factorize(kernel: &DMatrix<f64>, noise_var: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let scale = kernel.diagonal().max().max(f64::MIN_POSITIVE);
    let mut jitter = 0.0;
    loop {
        let mut k = kernel.clone();
        for i in 0..k.nrows() {
            k[(i, i)] += noise_var + jitter;
        }
        if let Some(chol) = Cholesky::new(k) {
            return Ok((chol, jitter));
        }
        jitter = if jitter == 0.0 { 1e-10 * scale } else { jitter * 10.0 };
        if jitter > MAX_JITTER * scale {
            return Err(Error::Numerical(format!(
                "kernel matrix not positive definite even with jitter {:.1e}",
                jitter / 10.0
            )));
        }
    }
}

fn log_marginal_from(chol: &Cholesky<f64, Dyn>, centred: &DVector<f64>, alpha: &DVector<f64>) -> f64 {
    let n = centred.len() as f64;
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
    -0.5 * centred.dot(alpha) - log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

/// Box on the log-hyperparameters, derived from the data scale.
#[derive(Debug, Clone, Copy)]
struct LogBounds {
    lower: [f64; 3],
    upper: [f64; 3],
}

impl LogBounds {
    fn clamp(&self, p: &[f64]) -> [f64; 3] {
        std::array::from_fn(|i| p[i].clamp(self.lower[i], self.upper[i]))
    }
}

#[derive(Clone)]
struct NegLogMarginal<'a> {
    x: &'a [Vec<f64>],
    centred: DVector<f64>,
    bounds: LogBounds,
}

impl NegLogMarginal<'_> {
    /// `[ln σ², ln ℓ, ln noise]` to hyperparameters, clamped to the search box.
    fn decode(&self, p: &[f64]) -> (KernelHyper, f64) {
        let [s, l, n] = self.bounds.clamp(p);
        let hyper = KernelHyper {
            signal_var: s.exp(),
            lengthscale: l.exp(),
        };
        (hyper, n.exp().max(NOISE_FLOOR))
    }
}

impl CostFunction for NegLogMarginal<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        let (hyper, noise) = self.decode(p);
        let kernel = kernel_matrix(self.x, &hyper);
        let Ok((chol, _)) = factorize(&kernel, noise) else {
            return Ok(f64::INFINITY);
        };
        let alpha = chol.solve(&self.centred);
        // Outside the box the cost grows so the simplex drifts back in.
        let overshoot: f64 = p
            .iter()
            .zip(self.bounds.lower.iter().zip(&self.bounds.upper))
            .map(|(&v, (&lo, &hi))| (lo - v).max(0.0) + (v - hi).max(0.0))
            .sum();
        Ok(-log_marginal_from(&chol, &self.centred, &alpha) + overshoot * overshoot)
    }
}

/// Fits σ², ℓ and the noise variance by maximising the log marginal likelihood
/// with multi-start Nelder–Mead in log space.
pub fn gp_fit(x: &[Vec<f64>], f: &[f64], cfg: &GpFitConfig) -> Result<GaussianProcess> {
    check_observations(x, f)?;
    if x.len() < 2 {
        return Err(Error::Input(format!("GP fit needs at least 2 observations, got {}", x.len())));
    }
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let var = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let var = if var > 1e-12 { var } else { 1.0 };
    let span = input_span(x);

    let bounds = LogBounds {
        lower: [(1e-4 * var).ln(), (1e-3 * span).ln(), NOISE_FLOOR.ln()],
        upper: [(1e2 * var).ln(), (1e2 * span).ln(), var.ln()],
    };
    let problem = NegLogMarginal {
        x,
        centred: DVector::from_iterator(f.len(), f.iter().map(|v| v - mean)),
        bounds,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for restart in 0..cfg.restarts.max(1) {
        let start: Vec<f64> = if restart == 0 {
            vec![var.ln(), (0.3 * span).ln(), (1e-2 * var).ln().max(bounds.lower[2])]
        } else {
            (0..3)
                .map(|i| rng.random_range(bounds.lower[i]..bounds.upper[i]))
                .collect()
        };
        let mut simplex = vec![start.clone()];
        for i in 0..3 {
            let mut vertex = start.clone();
            vertex[i] += 1.0;
            simplex.push(vertex);
        }
        let solver = NelderMead::new(simplex)
            .with_sd_tolerance(1e-8)
            .map_err(|e| Error::Numerical(format!("Nelder–Mead setup: {e}")))?;
        let run = Executor::new(problem.clone(), solver)
            .configure(|state| state.max_iters(cfg.max_iters))
            .run();
        match run {
            Ok(res) => {
                let state = res.state();
                if let Some(param) = state.get_best_param() {
                    let cost = state.get_best_cost();
                    if cost.is_finite() && best.as_ref().is_none_or(|(c, _)| cost < *c) {
                        best = Some((cost, param.clone()));
                    }
                }
            }
            Err(e) => log::debug!("GP restart {restart} failed: {e}"),
        }
    }
    let (_, param) = best.ok_or_else(|| {
        Error::Numerical("GP marginal-likelihood search found no finite optimum".into())
    })?;
    let (hyper, noise) = problem.decode(&param);
    GaussianProcess::with_hyper(x.to_vec(), f.to_vec(), hyper, noise)
}

/// Largest coordinate range of the inputs (1 when all inputs coincide).
fn input_span(x: &[Vec<f64>]) -> f64 {
    let dim = x[0].len();
    let span = (0..dim)
        .map(|j| {
            let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), row| {
                (lo.min(row[j]), hi.max(row[j]))
            });
            hi - lo
        })
        .fold(0.0, f64::max);
    if span > 0.0 {
        span
    } else {
        1.0
    }
}

/// Posterior predictive mean and latent-function variance at `x`.
pub fn gp_predict(gp: &GaussianProcess, x: &[f64]) -> (f64, f64) {
    let k = DVector::from_iterator(gp.x.len(), gp.x.iter().map(|xi| matern52_unchecked(xi, x, &gp.hyper)));
    let mean = gp.mean + k.dot(&gp.alpha);
    let v = gp
        .chol
        .l_dirty()
        .solve_lower_triangular(&k)
        .expect("Cholesky factor has a positive diagonal");
    let var = gp.hyper.signal_var - v.dot(&v);
    if var < 0.0 {
        log::debug!("clamped predictive variance {var:.3e} to 0");
    }
    (mean, var.max(0.0))
}
