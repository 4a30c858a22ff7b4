//! Implicit-likelihood Bayesian experimental design by mutual information
//! neural estimation.

pub mod error;
pub mod bo;
pub mod estimator;
pub mod models;
pub mod nn;
pub mod posterior;
pub mod reference;
pub mod trainer;

pub use bo::{bo_optimize, BoConfig, BoOutcome, BoSettings, Probe, ProbeRun};
pub use error::{Error, Result};
pub use estimator::{make_batch, mi_lower_bound, Batch, MiEstimate};
pub use models::{
    Domain, GradientFree, LinearModel, LinearNoise, LinearPrior, OscillatoryModel, PkModel, PkNoise,
    SimulatorModel,
};
pub use nn::{Activation, AdamState, LrSchedule, Network, NetworkConfig};
pub use posterior::{posterior_sample, summarize, DimSummary, PosteriorEstimate};
pub use reference::{
    analytic_mi_gaussian_linear, nested_mc_mi, CoordinateLikelihood, LinearLikelihood, NestedMcConfig,
    NestedMcEstimate, OscillatoryLikelihood, PkLikelihood,
};
pub use trainer::{
    grid_search, train_joint, validation_rng, validation_score, DesignInit, GridEntry, TraceRecord,
    TrainConfig, TrainResult, ValidationConfig, ValidationScore, Warnings,
};
