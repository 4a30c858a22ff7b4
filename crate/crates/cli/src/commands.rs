//! Subcommand bodies. Each writes its outputs, then `manifest.json`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ibed_core::reference::linear_noise_density;
use ibed_core::{
    analytic_mi_gaussian_linear, bo_optimize, grid_search, nested_mc_mi, summarize, train_joint,
    validation_rng, validation_score, CoordinateLikelihood, LinearLikelihood, LinearNoise, Network,
    NetworkConfig, OscillatoryLikelihood, PkLikelihood, PosteriorEstimate, SimulatorModel, TrainConfig,
};
use nalgebra::Matrix2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{config_err, BuiltModel, ExperimentConfig, ModelKind};
use crate::error::CliError;
use crate::output::{self, GpSummary, GridRow, Manifest, OutputWriter, ProbeRow, ReferenceRow};

/// RNG streams of the posterior pipeline, disjoint from training (0) and validation (1).
const OBSERVATION_STREAM: u64 = 2;
const PRIOR_STREAM: u64 = 3;
const RESAMPLE_STREAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Bo,
    Posterior,
    ReferenceMi,
    Validate,
    GridSearch,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Bo => "bo",
            Self::Posterior => "posterior",
            Self::ReferenceMi => "reference-mi",
            Self::Validate => "validate",
            Self::GridSearch => "grid-search",
        }
    }
}

/// Everything a subcommand needs besides the command itself.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    /// Network snapshot; defaults to `<out>/network.json`.
    pub network: Option<PathBuf>,
    /// Design file; defaults to `<out>/design.csv`.
    pub design: Option<PathBuf>,
}

impl RunContext {
    fn network_path(&self) -> PathBuf {
        self.network.clone().unwrap_or_else(|| self.out.join(output::NETWORK_FILE))
    }

    fn design_path(&self) -> PathBuf {
        self.design.clone().unwrap_or_else(|| self.out.join(output::DESIGN_FILE))
    }

    fn load_network(&self, model: &dyn SimulatorModel) -> Result<Network, CliError> {
        let path = self.network_path();
        require(&path)?;
        let net = output::read_network(&path)?;
        let cfg = net.config();
        if cfg.theta_dim != model.theta_dim() || cfg.data_dim != model.data_dim() {
            return Err(config_err(format!(
                "network snapshot {} takes ({}, {}) inputs, model needs ({}, {})",
                path.display(),
                cfg.theta_dim,
                cfg.data_dim,
                model.theta_dim(),
                model.data_dim()
            )));
        }
        Ok(net)
    }

    fn load_design(&self, model: &dyn SimulatorModel) -> Result<Vec<f64>, CliError> {
        let path = self.design_path();
        require(&path)?;
        let design = output::read_design(&path)?;
        if design.len() != model.design_dim() {
            return Err(config_err(format!(
                "design file {} has {} coordinates, model expects {}",
                path.display(),
                design.len(),
                model.design_dim()
            )));
        }
        Ok(design)
    }
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingInput {
            path: path.to_path_buf(),
            detail: "file not found".into(),
        })
    }
}

pub fn run(command: Command, ctx: &RunContext) -> Result<Manifest, CliError> {
    let start = Instant::now();
    ctx.config.validate()?;
    let mut out = OutputWriter::create(&ctx.out)?;
    match command {
        Command::Train => cmd_train(ctx, &mut out)?,
        Command::Bo => cmd_bo(ctx, &mut out)?,
        Command::Posterior => cmd_posterior(ctx, &mut out)?,
        Command::ReferenceMi => cmd_reference(ctx, &mut out)?,
        Command::Validate => cmd_validate(ctx, &mut out)?,
        Command::GridSearch => cmd_gridsearch(ctx, &mut out)?,
    }
    let manifest = Manifest {
        command: command.name().to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: ctx.config.seed,
        threads: rayon::current_num_threads(),
        config: ctx.config.clone(),
        files: out.files().to_vec(),
        duration_secs: start.elapsed().as_secs_f64(),
    };
    out.write_json(output::MANIFEST_FILE, &manifest)?;
    Ok(manifest)
}

fn cmd_train(ctx: &RunContext, out: &mut OutputWriter) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let model = cfg.build_model()?.simulator(cfg.model.gradient_free);
    let run = train_joint(model.as_ref(), &cfg.network_config(), &cfg.train_config()?)?;
    if let Some(last) = run.trace.last() {
        log::info!("final bound {:.4} (smoothed {:.4}) at design {:?}", last.mi_raw, last.mi_smoothed, run.design);
    }
    out.write_table(output::TRACE_FILE, &output::trace_table(&run.trace, model.design_dim()))?;
    out.write_table(output::DESIGN_FILE, &output::design_table(&run.design))?;
    out.write_json(output::NETWORK_FILE, &run.network)?;
    Ok(())
}

fn cmd_bo(ctx: &RunContext, out: &mut OutputWriter) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let section = cfg.bo.unwrap_or_default();
    let model = cfg.build_model()?.simulator(cfg.model.gradient_free);
    let outcome = bo_optimize(model.as_ref(), &cfg.bo_config(&section))?;
    let trace = outcome.incumbent_trace();
    let rows: Vec<ProbeRow> = outcome
        .probes
        .iter()
        .zip(&trace)
        .enumerate()
        .map(|(i, (p, &best))| ProbeRow {
            probe: i,
            initial: p.initial,
            value: p.value,
            best_so_far: best,
            error: p.error.clone().unwrap_or_default(),
            design: p.design.clone(),
        })
        .collect();
    out.write_table(output::PROBES_FILE, &output::probes_table(&rows, model.design_dim()))?;
    if let Some(gp) = &outcome.gp {
        out.write_json(
            output::GP_SUMMARY_FILE,
            &GpSummary {
                signal_var: gp.hyper().signal_var,
                lengthscale: gp.hyper().lengthscale,
                noise_var: gp.noise_var(),
                jitter: gp.jitter(),
                prior_mean: gp.prior_mean(),
                log_marginal_likelihood: gp.log_marginal_likelihood(),
            },
        )?;
    }
    out.write_table(output::DESIGN_FILE, &output::design_table(&outcome.best_design))?;
    let best = outcome
        .probes
        .iter()
        .filter(|p| p.value == Some(outcome.best_value))
        .find_map(|p| p.detail.as_ref());
    if let Some(run) = best {
        out.write_json(output::NETWORK_FILE, &run.train.network)?;
    }
    log::info!("best design {:?} with objective {:.4}", outcome.best_design, outcome.best_value);
    Ok(())
}

/// Observation, weights and resampled draws of one posterior run.
#[derive(Debug, Clone)]
pub struct PosteriorRun {
    pub y_star: Vec<f64>,
    pub estimate: PosteriorEstimate,
    pub samples: Vec<Vec<f64>>,
}

/// Simulates or reads `y*`, weights fresh prior draws with the critic and resamples.
pub fn posterior_pipeline(
    cfg: &ExperimentConfig,
    model: &dyn SimulatorModel,
    net: &Network,
    design: &[f64],
) -> Result<PosteriorRun, CliError> {
    let section = cfg.posterior.clone().unwrap_or_default();
    let stream = |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(s);
        rng
    };
    let y_star = match (&section.y_star, &section.theta_true) {
        (Some(y), _) => y.clone(),
        (None, Some(theta)) => model.simulate(theta, design, &mut stream(OBSERVATION_STREAM))?,
        (None, None) => return Err(config_err("posterior needs posterior.theta_true or posterior.y_star")),
    };
    let mut rng = stream(PRIOR_STREAM);
    let prior: Vec<Vec<f64>> = (0..section.prior_samples).map(|_| model.draw_prior(&mut rng)).collect();
    let estimate = PosteriorEstimate::new(net, prior, &y_star)?;
    let samples = estimate.sample(section.samples, &mut stream(RESAMPLE_STREAM))?;
    Ok(PosteriorRun {
        y_star,
        estimate,
        samples,
    })
}

fn cmd_posterior(ctx: &RunContext, out: &mut OutputWriter) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let model = cfg.build_model()?.simulator(false);
    let net = ctx.load_network(model.as_ref())?;
    let design = ctx.load_design(model.as_ref())?;
    let run = posterior_pipeline(cfg, model.as_ref(), &net, &design)?;
    log::info!(
        "effective sample size {:.1} of {}",
        run.estimate.effective_sample_size(),
        run.estimate.samples().len()
    );
    let dim = model.theta_dim();
    out.write_table(output::SAMPLES_FILE, &output::samples_table(&run.samples, dim))?;
    out.write_table(output::SUMMARY_FILE, &output::summary_table(&summarize(&run.samples)?))?;
    out.write_table(
        output::WEIGHTS_FILE,
        &output::weights_table(
            run.estimate.samples(),
            run.estimate.critic_values(),
            run.estimate.normalized_weights(),
        ),
    )?;
    let mut y = output::Table::new((0..run.y_star.len()).map(|i| format!("y_{i}")));
    y.push(run.y_star.iter().map(|&v| output::fmt_f(v)).collect());
    out.write_table("y_star.csv", &y)?;
    Ok(())
}

fn likelihood_for(built: &BuiltModel, seed: u64) -> Result<Box<dyn CoordinateLikelihood>, CliError> {
    Ok(match built {
        BuiltModel::Linear(m) => Box::new(LinearLikelihood {
            noise: linear_noise_density(m, seed)?,
        }),
        BuiltModel::Pk(m) => Box::new(PkLikelihood::for_model(m)),
        BuiltModel::Oscillatory(m) => Box::new(OscillatoryLikelihood::for_model(m)),
    })
}

fn cmd_reference(ctx: &RunContext, out: &mut OutputWriter) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let section = cfg.reference.clone().unwrap_or_default();
    let built = cfg.build_model()?;
    let model = built.simulator(false);
    let design = match &section.design {
        Some(d) => d.clone(),
        None => ctx.load_design(model.as_ref())?,
    };
    let likelihood = likelihood_for(&built, cfg.seed)?;
    let est = nested_mc_mi(model.as_ref(), likelihood.as_ref(), &design, &cfg.nested_mc_config(&section))?;
    let analytic = match (&built, cfg.kind()?) {
        (BuiltModel::Linear(m), ModelKind::GaussianLinear) => {
            let LinearNoise::Gaussian { std } = m.noise() else {
                unreachable!("gaussian-linear models carry Gaussian noise")
            };
            let s = m.prior().std;
            let cov = Matrix2::new(s[0] * s[0], 0.0, 0.0, s[1] * s[1]);
            Some(analytic_mi_gaussian_linear(&design, &cov, std * std)?)
        }
        _ => None,
    };
    log::info!("reference MI {:.4} ± {:.4}", est.value, est.std_error);
    let row = ReferenceRow {
        value: est.value,
        std_error: est.std_error,
        n_outer: section.n_outer,
        n_inner: section.n_inner,
        analytic,
        design,
    };
    out.write_table(output::REFERENCE_FILE, &output::reference_table(&row))?;
    Ok(())
}

fn cmd_validate(ctx: &RunContext, out: &mut OutputWriter) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let model = cfg.build_model()?.simulator(false);
    let net = ctx.load_network(model.as_ref())?;
    let design = ctx.load_design(model.as_ref())?;
    let v = cfg.validation_config();
    let score = validation_score(&net, model.as_ref(), &design, v.n_sets, v.set_size, &mut validation_rng(cfg.seed))?;
    log::info!("validation bound {:.4} ± {:.4}", score.mean, score.std);
    out.write_table(output::VALIDATION_FILE, &output::validation_table(&score, v.set_size))?;
    Ok(())
}

fn cmd_gridsearch(ctx: &RunContext, out: &mut OutputWriter) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let grid = cfg
        .grid
        .as_ref()
        .ok_or_else(|| config_err("grid-search needs a [grid] section"))?;
    let model = cfg.build_model()?.simulator(cfg.model.gradient_free);
    let base_net = cfg.network_config();
    let base_train = cfg.train_config()?;
    let rates = grid.lr_psi.clone().unwrap_or_else(|| vec![cfg.train.lr_psi]);
    let candidates: Vec<(NetworkConfig, TrainConfig)> = grid
        .hidden
        .iter()
        .flat_map(|h| {
            let base_net = &base_net;
            let base_train = &base_train;
            rates.iter().map(move |&rate| {
                let net = NetworkConfig {
                    hidden: h.clone(),
                    ..base_net.clone()
                };
                let mut train = base_train.clone();
                train.lr_psi.initial = rate;
                (net, train)
            })
        })
        .collect();
    let entries = grid_search(&candidates, model.as_ref(), cfg.validation_config())?;
    let rows: Vec<GridRow> = entries
        .iter()
        .enumerate()
        .map(|(rank, e)| GridRow {
            rank,
            candidate: e.index,
            hidden: e.network.hidden.clone(),
            lr_psi: e.train.lr_psi.initial,
            mean: e.score().map(|s| s.mean),
            std: e.score().map(|s| s.std),
            error: e.outcome.as_ref().err().cloned().unwrap_or_default(),
        })
        .collect();
    out.write_table(output::GRID_FILE, &output::grid_table(&rows))?;
    Ok(())
}
