//! Estimation and inference for multi-response generalized linear models
//! whose responses share unobserved confounders.

pub mod error;
pub mod estimator;
pub mod experiments;
pub mod family;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod pipeline;
mod rng;
pub mod simgen;
pub mod spectral;

pub use error::{GhiveError, Result};
pub use estimator::{
    fit_mle_one, fit_naive_mle, fit_qml_all, fit_qml_one, loglik_objective, make_split, quasi_objective, CoefMatrix,
    CrossFitCoefs, Dataset, FitControl, QmlFit, SplitPlan,
};
pub use experiments::{run_experiment, Estimator, ExperimentKind, ExperimentResult, ExperimentSpec};
pub use family::{Cumulant, GlmFamily};
pub use inference::{
    confidence_interval, confidence_interval_scaled, normal_quantile, Contrast, InferenceResult, SeScale,
};
pub use pipeline::{crossfit_stage, ghive_fit, CrossFitStage, FitMode, GhiveFit, ModeRecord};
pub use rng::rep_seed;
pub use simgen::{make_truth, metrics, sample_dataset, CirculantDecay, Metrics, SimConfig, SimTruth};
pub use spectral::{spectral_decompose, SpectralResult};

/// Seed used when the caller does not supply one.
pub const DEFAULT_SEED: u64 = 20_240_917;
