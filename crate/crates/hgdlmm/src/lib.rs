//! Robust estimation, prediction, inference and tuning for
//! independent-cluster linear mixed models via hierarchical gamma-divergence.
//!
//! The model `y_ij = x_ij' beta + z_ij' b_i + eps_ij` is fit by maximizing a
//! divergence that applies gamma-divergence separately to the response level
//! and the random-effects level, downweighting outliers at both levels
//! through normalized powered-density weights. The crate provides:
//!
//! - [`model`]: data structures, marginal/joint likelihoods, the BLUP;
//! - [`objective`]: density weights, the divergence, the MM surrogate;
//! - [`estimator`]: the MM fitting algorithm and score diagnostics;
//! - [`tuning`]: Hyvarinen-score selection of the robustness parameter;
//! - [`bootstrap`]: clustered bootstrap percentile intervals;
//! - [`sim`]: the contamination simulator and evaluation metrics.

pub mod bootstrap;
pub mod error;
pub mod estimator;
pub mod model;
pub mod objective;
pub mod sim;
pub mod tuning;

pub use bootstrap::{
    fit_weighted, run_bootstrap, sample_cluster_weights, BootstrapConfig, BootstrapResult,
};
pub use error::{Error, Result};
pub use estimator::{fit_hgd, init_params, wee_residuals, FitConfig, FitResult, Init};
pub use model::{
    blup, joint_modified_loglik, marginal_covariance, marginal_loglik, vech, ClusterData,
    Dataset, ModelParams, RandomEffects,
};
pub use objective::{
    compute_weights, evaluate_hgd, minorization_value, DensityWeights, GammaConfig,
};
pub use sim::{
    contamination_prob_error, interval_score, run_scenario, simulate_dataset, Method, Scenario,
    ScenarioConfig, ScenarioReport,
};
pub use tuning::{h_score_ranef, h_score_response, select_gamma, GammaGrid, TuningReport};
