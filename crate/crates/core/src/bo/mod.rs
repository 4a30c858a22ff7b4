//! Gradient-free design search: a Matérn-5/2 GP surrogate of the validated
//! bound, probed at expected-improvement maxima. Every probe trains a fresh
//! critic at a fixed design.

use rand::{Rng, RngCore, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::models::{Domain, SimulatorModel};
use crate::nn::{LrSchedule, NetworkConfig};
use crate::trainer::{train_joint, validation_rng, validation_score, DesignInit, TrainConfig, TrainResult, ValidationScore};

mod gp;

pub use gp::{gp_fit, gp_predict, matern52, GaussianProcess, GpFitConfig, KernelHyper, NOISE_FLOOR};

/// Closed-form EI for maximisation; 0 where the predictive std is 0.
pub fn expected_improvement(gp: &GaussianProcess, x: &[f64], best_so_far: f64) -> f64 {
    let (mean, var) = gp_predict(gp, x);
    ei_from_moments(mean, var.sqrt(), best_so_far)
}

fn ei_from_moments(mean: f64, std: f64, best: f64) -> f64 {
    if std <= 0.0 {
        return 0.0;
    }
    let z = (mean - best) / std;
    let cdf = 0.5 * erfc(-z / std::f64::consts::SQRT_2);
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    ((mean - best) * cdf + std * pdf).max(0.0)
}

/// `n` points with exactly one in each of the `n` equal strata per coordinate.
pub fn latin_hypercube(n: usize, domain: &Domain, rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
    let mut points = vec![vec![0.0; domain.dim()]; n];
    let mut strata: Vec<usize> = (0..n).collect();
    for j in 0..domain.dim() {
        strata.shuffle(rng);
        let (lo, hi) = (domain.lower[j], domain.upper[j]);
        for (point, &s) in points.iter_mut().zip(&strata) {
            let u: f64 = rng.random();
            point[j] = (lo + (s as f64 + u) / n as f64 * (hi - lo)).clamp(lo, hi);
        }
    }
    points
}

/// Coordinate-wise pattern search from `start`, halving the step when no
/// single-coordinate move improves `f`.
fn coordinate_search(f: &dyn Fn(&[f64]) -> f64, start: Vec<f64>, domain: &Domain) -> (Vec<f64>, f64) {
    let mut x = start;
    let mut value = f(&x);
    let mut step: Vec<f64> = domain.lower.iter().zip(&domain.upper).map(|(lo, hi)| 0.25 * (hi - lo)).collect();
    let min_step: Vec<f64> = step.iter().map(|s| s * 1e-6).collect();
    for _ in 0..10_000 {
        let mut improved = false;
        for j in 0..x.len() {
            for dir in [1.0, -1.0] {
                let mut candidate = x.clone();
                candidate[j] = (x[j] + dir * step[j]).clamp(domain.lower[j], domain.upper[j]);
                if candidate[j] == x[j] {
                    continue;
                }
                let v = f(&candidate);
                if v > value {
                    x = candidate;
                    value = v;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            for s in &mut step {
                *s *= 0.5;
            }
            if step.iter().zip(&min_step).all(|(s, m)| s < m) {
                break;
            }
        }
    }
    (x, value)
}

/// Multi-start maximisation of EI over the domain; the first start is `incumbent`.
pub fn maximize_acquisition(
    gp: &GaussianProcess,
    domain: &Domain,
    best_so_far: f64,
    incumbent: &[f64],
    restarts: usize,
    rng: &mut dyn RngCore,
) -> (Vec<f64>, f64) {
    let ei = |x: &[f64]| expected_improvement(gp, x, best_so_far);
    let mut best = (incumbent.to_vec(), f64::NEG_INFINITY);
    for r in 0..restarts.max(1) {
        let start = if r == 0 {
            incumbent.to_vec()
        } else {
            domain.sample_uniform(rng)
        };
        let (x, v) = coordinate_search(&ei, start, domain);
        if v > best.1 {
            best = (x, v);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoSettings {
    pub initial_probe_count: usize,
    pub budget: usize,
    pub acquisition_restarts: usize,
    pub gp_restarts: usize,
    pub seed: u64,
}

impl Default for BoSettings {
    fn default() -> Self {
        Self {
            initial_probe_count: 5,
            budget: 25,
            acquisition_restarts: 32,
            gp_restarts: 8,
            seed: 0,
        }
    }
}

impl BoSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.budget >= self.initial_probe_count && self.initial_probe_count >= 1) {
            return Err(Error::Config(format!(
                "need budget >= initial_probe_count >= 1, got budget {} and {} initial probes",
                self.budget, self.initial_probe_count
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Probe<T> {
    pub design: Vec<f64>,
    /// `None` when the evaluation failed.
    pub value: Option<f64>,
    pub detail: Option<T>,
    pub error: Option<String>,
    /// Drawn from the space-filling initial set rather than an EI maximum.
    pub initial: bool,
}

#[derive(Debug, Clone)]
pub struct BoOutcome<T> {
    pub best_design: Vec<f64>,
    pub best_value: f64,
    pub probes: Vec<Probe<T>>,
    /// Surrogate fitted to all successful probes, if there were at least two.
    pub gp: Option<GaussianProcess>,
}

impl<T> BoOutcome<T> {
    /// Best objective after each probe (−∞ until the first success).
    pub fn incumbent_trace(&self) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        self.probes
            .iter()
            .map(|p| {
                if let Some(v) = p.value {
                    best = best.max(v);
                }
                best
            })
            .collect()
    }
}

fn probe_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn run_probe<T>(
    objective: &(dyn Fn(&[f64], u64) -> Result<(f64, T)> + Sync),
    design: Vec<f64>,
    seed: u64,
    initial: bool,
) -> Probe<T> {
    match objective(&design, seed).and_then(|(v, t)| {
        if v.is_finite() {
            Ok((v, t))
        } else {
            Err(Error::Numerical(format!("objective returned {v}")))
        }
    }) {
        Ok((v, t)) => Probe {
            design,
            value: Some(v),
            detail: Some(t),
            error: None,
            initial,
        },
        Err(e) => {
            log::warn!("probe at {design:?} failed: {e}");
            Probe {
                design,
                value: None,
                detail: None,
                error: Some(e.to_string()),
                initial,
            }
        }
    }
}

/// Maximises `objective(design, probe_seed)` over `domain`. Failed probes are
/// recorded and excluded from the surrogate.
pub fn bo_maximize<T: Send>(
    domain: &Domain,
    settings: &BoSettings,
    objective: &(dyn Fn(&[f64], u64) -> Result<(f64, T)> + Sync),
) -> Result<BoOutcome<T>> {
    settings.validate()?;
    domain.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let initial = latin_hypercube(settings.initial_probe_count, domain, &mut rng);
    let mut probes: Vec<Probe<T>> = initial
        .into_par_iter()
        .enumerate()
        .map(|(k, d)| run_probe(objective, d, probe_seed(settings.seed, k), true))
        .collect();

    let gp_cfg = |k: usize| GpFitConfig {
        restarts: settings.gp_restarts,
        seed: probe_seed(settings.seed ^ 0x5EED, k),
        ..GpFitConfig::default()
    };
    let observed = |probes: &[Probe<T>]| -> (Vec<Vec<f64>>, Vec<f64>) {
        probes
            .iter()
            .filter_map(|p| p.value.map(|v| (p.design.clone(), v)))
            .unzip()
    };

    while probes.len() < settings.budget {
        let k = probes.len();
        let (x, f) = observed(&probes);
        let next = if x.len() < 2 {
            log::warn!("fewer than two successful probes; probing uniformly at random");
            domain.sample_uniform(&mut rng)
        } else {
            let gp = gp_fit(&x, &f, &gp_cfg(k))?;
            let (incumbent, best) = x
                .iter()
                .zip(&f)
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(d, v)| (d.clone(), *v))
                .expect("at least two observations");
            let (d, ei) = maximize_acquisition(&gp, domain, best, &incumbent, settings.acquisition_restarts, &mut rng);
            log::debug!("probe {k}: EI {ei:.3e} at {d:?}");
            if ei > 0.0 {
                d
            } else {
                domain.sample_uniform(&mut rng)
            }
        };
        probes.push(run_probe(objective, next, probe_seed(settings.seed, k), false));
    }

    let (x, f) = observed(&probes);
    let best = probes
        .iter()
        .filter_map(|p| p.value.map(|v| (p, v)))
        .max_by(|a, b| a.1.total_cmp(&b.1));
    let Some((best_probe, best_value)) = best else {
        return Err(Error::Numerical(format!("all {} probes failed", probes.len())));
    };
    let best_design = best_probe.design.clone();
    let gp = if x.len() >= 2 {
        Some(gp_fit(&x, &f, &gp_cfg(probes.len()))?)
    } else {
        None
    };
    Ok(BoOutcome {
        best_design,
        best_value,
        probes,
        gp,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoConfig {
    pub settings: BoSettings,
    pub network: NetworkConfig,
    /// Per-probe training; its design learning rate and initial design are
    /// overridden with 0 and the probed design.
    pub train: TrainConfig,
    /// Validation sets averaged into each probe's objective.
    pub validation_sets: usize,
    pub validation_size: usize,
}

impl BoConfig {
    pub fn new(network: NetworkConfig, train: TrainConfig) -> Self {
        let validation_size = train.batch_size;
        Self {
            settings: BoSettings::default(),
            network,
            train,
            validation_sets: 3,
            validation_size,
        }
    }
}

/// Training run and validation score behind one probe.
#[derive(Debug, Clone)]
pub struct ProbeRun {
    pub train: TrainResult,
    pub score: ValidationScore,
}

/// Fresh-critic training at a fixed design, scored by the mean validation bound.
pub fn probe_objective(
    model: &dyn SimulatorModel,
    cfg: &BoConfig,
    design: &[f64],
    seed: u64,
) -> Result<(f64, ProbeRun)> {
    let train_cfg = TrainConfig {
        lr_design: LrSchedule::constant(0.0),
        design_init: DesignInit::Explicit(design.to_vec()),
        seed,
        ..cfg.train.clone()
    };
    let netcfg = cfg.network.clone().with_seed(seed);
    let train = train_joint(model, &netcfg, &train_cfg)?;
    let mut rng = validation_rng(seed);
    let score = validation_score(&train.network, model, design, cfg.validation_sets, cfg.validation_size, &mut rng)?;
    Ok((score.mean, ProbeRun { train, score }))
}

/// Bayesian optimisation of the design with critic retraining at every probe.
pub fn bo_optimize(model: &dyn SimulatorModel, cfg: &BoConfig) -> Result<BoOutcome<ProbeRun>> {
    if cfg.validation_sets == 0 {
        return Err(Error::Config("validation_sets must be at least 1".into()));
    }
    let objective = |d: &[f64], seed: u64| probe_objective(model, cfg, d, seed);
    bo_maximize(model.domain(), &cfg.settings, &objective)
}
