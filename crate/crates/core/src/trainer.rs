//! Joint stochastic gradient ascent over critic parameters and design.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::estimator::{evaluate, make_batch, mi_lower_bound, Wants};
use crate::models::{Domain, SimulatorModel};
use crate::nn::{AdamState, LrSchedule, Network, NetworkConfig};

/// RNG stream reserved for validation sets drawn after training.
const VALIDATION_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignInit {
    /// Uniform draw inside the domain.
    Uniform,
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_psi: LrSchedule,
    pub lr_design: LrSchedule,
    pub seed: u64,
    pub design_init: DesignInit,
    pub moving_average_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20_000,
            batch_size: 30_000,
            lr_psi: LrSchedule::constant(1e-4),
            lr_design: LrSchedule::constant(1e-2),
            seed: 0,
            design_init: DesignInit::Uniform,
            moving_average_window: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.moving_average_window == 0 {
            return Err(Error::Config("moving_average_window must be at least 1".into()));
        }
        self.lr_psi.validate()?;
        self.lr_design.validate()
    }

    /// True when the design learning rate is zero at every epoch.
    pub fn fixed_design(&self) -> bool {
        self.lr_design.initial == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub mi_raw: f64,
    pub mi_smoothed: f64,
    /// Design after this epoch's update.
    pub design: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warnings {
    /// Marginal critic values clamped inside the exponential.
    pub clamped: usize,
    /// Design coordinates whose update was ignored by the domain rule.
    pub domain_rejections: usize,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub design: Vec<f64>,
    pub network: Network,
    pub trace: Vec<TraceRecord>,
    pub warnings: Warnings,
}

impl TrainResult {
    pub fn final_smoothed(&self) -> Option<f64> {
        self.trace.last().map(|r| r.mi_smoothed)
    }
}

/// Per-coordinate: a proposed value outside the domain is discarded and the
/// previous value kept.
pub fn apply_domain_rule(previous: &[f64], proposed: &[f64], domain: &Domain) -> Vec<f64> {
    previous
        .iter()
        .zip(proposed)
        .enumerate()
        .map(|(i, (&prev, &next))| {
            if next >= domain.lower[i] && next <= domain.upper[i] {
                next
            } else {
                prev
            }
        })
        .collect()
}

/// Trains the critic and, unless the design learning rate is zero, the design.
pub fn train_joint(
    model: &dyn SimulatorModel,
    netcfg: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    check_len("network theta dim", model.theta_dim(), netcfg.theta_dim)?;
    check_len("network data dim", model.data_dim(), netcfg.data_dim)?;
    let optimise_design = !cfg.fixed_design();
    if optimise_design && !model.has_gradients() {
        return Err(Error::NoGradients(model.name().to_string()));
    }

    let domain = model.domain();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut design = match &cfg.design_init {
        DesignInit::Uniform => domain.sample_uniform(&mut rng),
        DesignInit::Explicit(d) => {
            check_len("initial design", model.design_dim(), d.len())?;
            if !domain.contains(d) {
                return Err(Error::Config(format!("initial design {d:?} lies outside the domain")));
            }
            d.clone()
        }
    };

    let mut network = Network::new(netcfg.clone())?;
    let mut adam_psi = AdamState::new(network.num_params());
    let mut adam_design = AdamState::new(design.len());
    let mut trace: Vec<TraceRecord> = Vec::with_capacity(cfg.epochs);
    let mut raw: Vec<f64> = Vec::with_capacity(cfg.epochs);
    let mut warnings = Warnings::default();
    let window = cfg.moving_average_window;

    for epoch in 0..cfg.epochs {
        let batch = make_batch(model, &design, cfg.batch_size, &mut rng)?;
        let diverged = |detail: String| Error::Diverged {
            epoch,
            design: design.clone(),
            detail,
        };
        let eval = evaluate(
            &network,
            &batch,
            Some(model),
            Wants {
                psi: true,
                design: optimise_design,
            },
        )
        .map_err(|e| diverged(e.to_string()))?;
        let value = eval.estimate.value;
        if !value.is_finite() {
            return Err(diverged(format!(
                "bound {value}; joint mean T {}, max marginal T {}",
                eval.estimate.joint_term, eval.max_marginal_critic
            )));
        }
        warnings.clamped += eval.clamped;

        let grad_psi = eval.grad_psi.expect("requested");
        adam_psi
            .step(network.params_mut(), &grad_psi, cfg.lr_psi.rate(epoch))
            .map_err(|e| diverged(e.to_string()))?;
        if let Some(grad_d) = eval.grad_design {
            let mut proposed = design.clone();
            adam_design
                .step(&mut proposed, &grad_d, cfg.lr_design.rate(epoch))
                .map_err(|e| diverged(e.to_string()))?;
            let accepted = apply_domain_rule(&design, &proposed, domain);
            warnings.domain_rejections +=
                accepted.iter().zip(&proposed).filter(|(a, p)| a != p).count();
            design = accepted;
        }

        raw.push(value);
        let tail = &raw[raw.len().saturating_sub(window)..];
        trace.push(TraceRecord {
            epoch,
            mi_raw: value,
            mi_smoothed: tail.iter().sum::<f64>() / tail.len() as f64,
            design: design.clone(),
        });
        if epoch % 1000 == 0 {
            log::debug!("epoch {epoch}: bound {value:.4}, design {design:?}");
        }
    }
    if warnings.clamped > 0 {
        log::warn!("{} critic values were clamped during training", warnings.clamped);
    }

    Ok(TrainResult {
        design,
        network,
        trace,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationScore {
    pub mean: f64,
    /// Sample standard deviation; 0 when only one set was scored.
    pub std: f64,
    pub n_sets: usize,
    /// Set when `n_sets == 1` and `std` carries no information.
    pub single_set: bool,
}

/// Bound estimates on `n_sets` fresh batches at a fixed design.
pub fn validation_score(
    net: &Network,
    model: &dyn SimulatorModel,
    design: &[f64],
    n_sets: usize,
    set_size: usize,
    rng: &mut dyn RngCore,
) -> Result<ValidationScore> {
    if n_sets == 0 {
        return Err(Error::Input("validation needs at least one set".into()));
    }
    let values = (0..n_sets)
        .map(|_| {
            let batch = make_batch(model, design, set_size, rng)?;
            Ok(mi_lower_bound(net, &batch)?.value)
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if n_sets > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        log::warn!("validation with a single set reports std 0");
        0.0
    };
    Ok(ValidationScore {
        mean,
        std,
        n_sets,
        single_set: n_sets == 1,
    })
}

/// Validation RNG for a run trained with `seed`, independent of the training draws.
pub fn validation_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(VALIDATION_STREAM);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationConfig {
    pub n_sets: usize,
    pub set_size: usize,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            n_sets: 10,
            set_size: 30_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridEntry {
    /// Position in the candidate list.
    pub index: usize,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub outcome: std::result::Result<(ValidationScore, Vec<f64>), String>,
}

impl GridEntry {
    pub fn score(&self) -> Option<&ValidationScore> {
        self.outcome.as_ref().ok().map(|(s, _)| s)
    }
}

/// Trains and scores every candidate; returns entries ranked by descending
/// validation mean, failed candidates last. Validation draws come from each
/// candidate's own seed.
pub fn grid_search(
    candidates: &[(NetworkConfig, TrainConfig)],
    model: &dyn SimulatorModel,
    validation: ValidationConfig,
) -> Result<Vec<GridEntry>> {
    if candidates.is_empty() {
        return Err(Error::Input("grid search needs at least one candidate".into()));
    }
    let mut entries: Vec<GridEntry> = candidates
        .par_iter()
        .enumerate()
        .map(|(index, (netcfg, traincfg))| {
            let outcome = train_joint(model, netcfg, traincfg).and_then(|run| {
                let mut rng = validation_rng(traincfg.seed);
                let score = validation_score(
                    &run.network,
                    model,
                    &run.design,
                    validation.n_sets,
                    validation.set_size,
                    &mut rng,
                )?;
                Ok((score, run.design))
            });
            if let Err(e) = &outcome {
                log::warn!("grid candidate {index} failed: {e}");
            }
            GridEntry {
                index,
                network: netcfg.clone(),
                train: traincfg.clone(),
                outcome: outcome.map_err(|e| e.to_string()),
            }
        })
        .collect();
    entries.sort_by(|a, b| match (a.score(), b.score()) {
        (Some(x), Some(y)) => y.mean.total_cmp(&x.mean).then(a.index.cmp(&b.index)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.index.cmp(&b.index),
    });
    Ok(entries)
}
