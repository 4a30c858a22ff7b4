//! TOML experiment configuration. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use ibed_core::{
    BoConfig, BoSettings, DesignInit, Domain, GradientFree, LinearModel, LinearPrior, LrSchedule,
    NestedMcConfig, NetworkConfig, OscillatoryModel, PkModel, PkNoise, SimulatorModel, TrainConfig,
    ValidationConfig,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub validation: ValidationSection,
    pub bo: Option<BoSection>,
    pub reference: Option<ReferenceSection>,
    pub posterior: Option<PosteriorSection>,
    pub grid: Option<GridSection>,
    pub output: Option<OutputSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// `linear`, `gaussian-linear`, `pk` or `oscillatory`.
    pub name: String,
    pub design_dim: usize,
    pub domain_lower: Option<Vec<f64>>,
    pub domain_upper: Option<Vec<f64>>,
    /// Linear models only.
    pub prior_mean: Option<[f64; 2]>,
    pub prior_std: Option<[f64; 2]>,
    /// PK model only.
    pub pk_noise: Option<PkNoiseChoice>,
    /// Hide the design Jacobian so only `bo` can optimise the design.
    #[serde(default)]
    pub gradient_free: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PkNoiseChoice {
    Wide,
    Narrow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub hidden: Vec<usize>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self { hidden: vec![100] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_psi: f64,
    pub lr_design: f64,
    /// Multiplier applied to both learning rates every `lr_period` epochs.
    pub lr_multiplier: f64,
    pub lr_period: usize,
    /// Uniform draw inside the domain when absent.
    pub initial_design: Option<Vec<f64>>,
    pub moving_average_window: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_psi: t.lr_psi.initial,
            lr_design: t.lr_design.initial,
            lr_multiplier: 1.0,
            lr_period: 5000,
            initial_design: None,
            moving_average_window: t.moving_average_window,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationSection {
    pub n_sets: usize,
    /// Defaults to the training batch size.
    pub set_size: Option<usize>,
}

impl Default for ValidationSection {
    fn default() -> Self {
        Self {
            n_sets: ValidationConfig::default().n_sets,
            set_size: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoSection {
    pub initial_probe_count: usize,
    pub budget: usize,
    pub acquisition_restarts: usize,
    pub gp_restarts: usize,
    pub validation_sets: usize,
    pub validation_size: Option<usize>,
}

impl Default for BoSection {
    fn default() -> Self {
        let s = BoSettings::default();
        Self {
            initial_probe_count: s.initial_probe_count,
            budget: s.budget,
            acquisition_restarts: s.acquisition_restarts,
            gp_restarts: s.gp_restarts,
            validation_sets: 3,
            validation_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceSection {
    pub n_outer: usize,
    pub n_inner: usize,
    /// Read from the design file when absent.
    pub design: Option<Vec<f64>>,
}

impl Default for ReferenceSection {
    fn default() -> Self {
        let n = NestedMcConfig::default();
        Self {
            n_outer: n.n_outer,
            n_inner: n.n_inner,
            design: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PosteriorSection {
    /// Parameters used to simulate the observation `y*`.
    pub theta_true: Option<Vec<f64>>,
    /// Observed data; overrides simulation at `theta_true`.
    pub y_star: Option<Vec<f64>>,
    pub prior_samples: usize,
    pub samples: usize,
}

impl Default for PosteriorSection {
    fn default() -> Self {
        Self {
            theta_true: None,
            y_star: None,
            prior_samples: 100_000,
            samples: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub hidden: Vec<Vec<usize>>,
    /// Defaults to `[train.lr_psi]`.
    pub lr_psi: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Linear,
    GaussianLinear,
    Pk,
    Oscillatory,
}

impl ModelKind {
    pub fn parse(name: &str) -> Result<Self, CliError> {
        match name {
            "linear" => Ok(Self::Linear),
            "gaussian-linear" => Ok(Self::GaussianLinear),
            "pk" => Ok(Self::Pk),
            "oscillatory" => Ok(Self::Oscillatory),
            other => Err(CliError::UnknownModel(other.to_string())),
        }
    }

    pub fn theta_dim(self) -> usize {
        match self {
            Self::Linear | Self::GaussianLinear => 2,
            Self::Pk => 3,
            Self::Oscillatory => 1,
        }
    }
}

/// A resolved model, keeping the concrete type for likelihood construction.
#[derive(Debug, Clone)]
pub enum BuiltModel {
    Linear(LinearModel),
    Pk(PkModel),
    Oscillatory(OscillatoryModel),
}

impl BuiltModel {
    fn inner(&self) -> &dyn SimulatorModel {
        match self {
            Self::Linear(m) => m,
            Self::Pk(m) => m,
            Self::Oscillatory(m) => m,
        }
    }

    /// The simulator, with its Jacobian hidden when `gradient_free` is set.
    pub fn simulator(&self, gradient_free: bool) -> Box<dyn SimulatorModel> {
        match (self.clone(), gradient_free) {
            (Self::Linear(m), false) => Box::new(m),
            (Self::Linear(m), true) => Box::new(GradientFree(m)),
            (Self::Pk(m), false) => Box::new(m),
            (Self::Pk(m), true) => Box::new(GradientFree(m)),
            (Self::Oscillatory(m), false) => Box::new(m),
            (Self::Oscillatory(m), true) => Box::new(GradientFree(m)),
        }
    }
}

pub fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::MissingInput {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    pub fn kind(&self) -> Result<ModelKind, CliError> {
        ModelKind::parse(&self.model.name)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let kind = self.kind()?;
        let m = &self.model;
        if m.design_dim == 0 {
            return Err(config_err("model.design_dim must be at least 1"));
        }
        let linear = matches!(kind, ModelKind::Linear | ModelKind::GaussianLinear);
        if !linear && (m.prior_mean.is_some() || m.prior_std.is_some()) {
            return Err(config_err("model.prior_mean / prior_std apply to linear models only"));
        }
        if kind != ModelKind::Pk && m.pk_noise.is_some() {
            return Err(config_err("model.pk_noise applies to the pk model only"));
        }
        self.build_model()?;
        self.network_config().validate()?;
        self.train_config()?.validate()?;
        if let Some(init) = &self.train.initial_design {
            check_dim("train.initial_design", m.design_dim, init.len())?;
        }
        if self.validation.n_sets == 0 {
            return Err(config_err("validation.n_sets must be at least 1"));
        }
        if let Some(bo) = &self.bo {
            self.bo_config(bo).settings.validate()?;
            if bo.validation_sets == 0 {
                return Err(config_err("bo.validation_sets must be at least 1"));
            }
        }
        if let Some(r) = &self.reference {
            self.nested_mc_config(r).validate()?;
            if let Some(d) = &r.design {
                check_dim("reference.design", m.design_dim, d.len())?;
            }
        }
        if let Some(p) = &self.posterior {
            if let Some(t) = &p.theta_true {
                check_dim("posterior.theta_true", kind.theta_dim(), t.len())?;
            }
            if let Some(y) = &p.y_star {
                check_dim("posterior.y_star", m.design_dim, y.len())?;
            }
            if p.prior_samples == 0 || p.samples == 0 {
                return Err(config_err("posterior.prior_samples and posterior.samples must be positive"));
            }
        }
        if let Some(g) = &self.grid {
            if g.hidden.is_empty() || g.lr_psi.as_ref().is_some_and(|l| l.is_empty()) {
                return Err(config_err("grid.hidden and grid.lr_psi must be non-empty"));
            }
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<BuiltModel, CliError> {
        let m = &self.model;
        let dim = m.design_dim;
        let mut built = match self.kind()? {
            ModelKind::Linear | ModelKind::GaussianLinear => {
                let base = if self.kind()? == ModelKind::Linear {
                    LinearModel::noisy(dim)
                } else {
                    LinearModel::gaussian(dim)
                };
                let defaults = LinearPrior::default();
                let prior = LinearPrior {
                    mean: m.prior_mean.unwrap_or(defaults.mean),
                    std: m.prior_std.unwrap_or(defaults.std),
                };
                if prior.std.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
                    return Err(config_err("model.prior_std must be finite and >= 0"));
                }
                BuiltModel::Linear(base.with_prior(prior))
            }
            ModelKind::Pk => {
                let noise = match m.pk_noise.unwrap_or(PkNoiseChoice::Wide) {
                    PkNoiseChoice::Wide => PkNoise::WIDE,
                    PkNoiseChoice::Narrow => PkNoise::NARROW,
                };
                BuiltModel::Pk(PkModel::new(dim).with_noise(noise)?)
            }
            ModelKind::Oscillatory => BuiltModel::Oscillatory(OscillatoryModel::new(dim)),
        };
        if m.domain_lower.is_some() || m.domain_upper.is_some() {
            let current = built.inner().domain().clone();
            let domain = Domain::new(
                m.domain_lower.clone().unwrap_or(current.lower),
                m.domain_upper.clone().unwrap_or(current.upper),
            )?;
            check_dim("model domain", dim, domain.dim())?;
            built = match built {
                BuiltModel::Linear(x) => BuiltModel::Linear(x.with_domain(domain)),
                BuiltModel::Pk(x) => BuiltModel::Pk(x.with_domain(domain)),
                BuiltModel::Oscillatory(x) => BuiltModel::Oscillatory(x.with_domain(domain)),
            };
        }
        Ok(built)
    }

    pub fn network_config(&self) -> NetworkConfig {
        let kind = self.kind().map(ModelKind::theta_dim).unwrap_or(0);
        NetworkConfig::new(kind, self.model.design_dim, self.network.hidden.clone()).with_seed(self.seed)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        let schedule = |rate| LrSchedule::stepped(rate, t.lr_multiplier, t.lr_period);
        Ok(TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_psi: schedule(t.lr_psi),
            lr_design: schedule(t.lr_design),
            seed: self.seed,
            design_init: match &t.initial_design {
                Some(d) => DesignInit::Explicit(d.clone()),
                None => DesignInit::Uniform,
            },
            moving_average_window: t.moving_average_window,
        })
    }

    pub fn validation_config(&self) -> ValidationConfig {
        ValidationConfig {
            n_sets: self.validation.n_sets,
            set_size: self.validation.set_size.unwrap_or(self.train.batch_size),
        }
    }

    pub fn bo_config(&self, bo: &BoSection) -> BoConfig {
        let train = self.train_config().unwrap_or_default();
        let mut cfg = BoConfig::new(self.network_config(), train);
        cfg.settings = BoSettings {
            initial_probe_count: bo.initial_probe_count,
            budget: bo.budget,
            acquisition_restarts: bo.acquisition_restarts,
            gp_restarts: bo.gp_restarts,
            seed: self.seed,
        };
        cfg.validation_sets = bo.validation_sets;
        cfg.validation_size = bo.validation_size.unwrap_or(self.train.batch_size);
        cfg
    }

    pub fn nested_mc_config(&self, r: &ReferenceSection) -> NestedMcConfig {
        NestedMcConfig {
            n_outer: r.n_outer,
            n_inner: r.n_inner,
            seed: self.seed,
        }
    }

    /// `--out`, then `output.dir`, then `./out`.
    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output.as_ref().map(|o| o.dir.clone()))
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn check_dim(what: &str, expected: usize, actual: usize) -> Result<(), CliError> {
    if expected == actual {
        Ok(())
    } else {
        Err(config_err(format!("{what} has length {actual}, expected {expected}")))
    }
}
