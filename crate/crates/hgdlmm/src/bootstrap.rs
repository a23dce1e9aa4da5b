//! Clustered bootstrap: cluster-level Dirichlet weights folded into the
//! density-weight normalizations, percentile confidence intervals for the
//! model parameters and prediction intervals for the random effects.
//!
//! Replicates are embarrassingly parallel. Each owns a counter-based RNG
//! substream keyed by `(seed, replicate index)`, so results are reproducible
//! regardless of execution order; assembly is ordered by replicate index.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::{fit_driver, FitConfig, FitResult, Init};
use crate::model::Dataset;

/// Bootstrap settings. The replicate count defaults to 500 and the interval
/// level to 0.95; the seed is always explicit.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
}

impl BootstrapConfig {
    pub fn new(seed: u64) -> Self {
        Self { replicates: 500, level: 0.95, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::InvalidConfig("bootstrap needs at least 2 replicates".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "interval level must lie in (0, 1), got {}",
                self.level
            )));
        }
        Ok(())
    }
}

/// A percentile interval for one scalar quantity.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ParameterInterval {
    pub lower: f64,
    pub upper: f64,
}

/// Bootstrap draws and percentile intervals.
#[derive(Debug, Clone, Serialize)]
pub struct BootstrapResult {
    /// One row per retained replicate.
    pub beta_draws: Vec<Vec<f64>>,
    pub sigma2_draws: Vec<f64>,
    /// vech(R) per retained replicate.
    pub r_vech_draws: Vec<Vec<f64>>,
    /// `[replicate][cluster][component]`.
    pub ranef_draws: Vec<Vec<Vec<f64>>>,
    pub beta_intervals: Vec<ParameterInterval>,
    pub sigma2_interval: ParameterInterval,
    pub r_vech_intervals: Vec<ParameterInterval>,
    /// Prediction intervals `[cluster][component]`, at fixed cluster identity.
    pub ranef_intervals: Vec<Vec<ParameterInterval>>,
    pub level: f64,
    /// Replicates dropped for non-convergence.
    pub dropped: usize,
}

/// Draws `xi ~ m * Dirichlet(1, ..., 1)` as normalized unit-rate exponentials,
/// so each weight has mean one and the weights sum to `m`.
pub fn sample_cluster_weights<R: Rng + ?Sized>(m: usize, rng: &mut R) -> DVector<f64> {
    let e: Vec<f64> = (0..m).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = e.iter().sum();
    DVector::from_iterator(m, e.into_iter().map(|v| m as f64 * (v / total)))
}

/// Fits with cluster weights `xi` folded into both weight normalizations.
/// `xi = 1` reproduces [`crate::estimator::fit_hgd`] exactly (same code path).
pub fn fit_weighted(data: &Dataset, xi: &DVector<f64>, cfg: &FitConfig) -> Result<FitResult> {
    fit_driver(data, xi, cfg)
}

/// Density weights with the bootstrap multipliers folded in; diagnostic
/// counterpart of [`crate::objective::compute_weights`].
pub fn density_weights_weighted(
    data: &Dataset,
    params: &crate::model::ModelParams,
    ranef: &crate::model::RandomEffects,
    cfg: &crate::objective::GammaConfig,
    xi: &DVector<f64>,
) -> Result<crate::objective::DensityWeights> {
    crate::objective::compute_weights_xi(data, params, ranef, cfg.gamma(), xi)
}

/// Scaled xi-weighted estimating-equation residuals; zero at a converged
/// weighted fit.
pub fn wee_residuals_weighted(
    data: &Dataset,
    params: &crate::model::ModelParams,
    ranef: &crate::model::RandomEffects,
    cfg: &FitConfig,
    xi: &DVector<f64>,
) -> Result<DVector<f64>> {
    crate::estimator::wee_residuals_xi(data, params, ranef, cfg.gamma, xi)
}

/// Runs the clustered bootstrap around a converged fit.
///
/// Every replicate refits at the same gamma as the original fit, warm-started
/// from it. Non-converged replicates are dropped and counted; more than 20%
/// dropped is an error.
pub fn run_bootstrap(
    data: &Dataset,
    fit: &FitResult,
    bcfg: &BootstrapConfig,
) -> Result<BootstrapResult> {
    bcfg.validate()?;
    let m = data.m();
    let replicate_cfg = FitConfig::new(fit.gamma)
        .with_init(Init::Provided(fit.params.clone(), fit.ranef.clone()));

    let draws: Vec<Option<FitResult>> = (0..bcfg.replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(bcfg.seed);
            rng.set_stream(r as u64);
            let xi = sample_cluster_weights(m, &mut rng);
            match fit_weighted(data, &xi, &replicate_cfg) {
                Ok(f) if f.converged => Some(f),
                _ => None,
            }
        })
        .collect();

    let total = draws.len();
    let kept: Vec<FitResult> = draws.into_iter().flatten().collect();
    let dropped = total - kept.len();
    if dropped * 5 > total {
        return Err(Error::BootstrapUnstable { dropped, total });
    }

    let p = data.p();
    let q = data.q();
    let beta_draws: Vec<Vec<f64>> =
        kept.iter().map(|f| f.params.beta().iter().cloned().collect()).collect();
    let sigma2_draws: Vec<f64> = kept.iter().map(|f| f.params.sigma2()).collect();
    let r_vech_draws: Vec<Vec<f64>> = kept.iter().map(|f| f.params.vech_r()).collect();
    let ranef_draws: Vec<Vec<Vec<f64>>> = kept
        .iter()
        .map(|f| f.ranef.all().iter().map(|b| b.iter().cloned().collect()).collect())
        .collect();

    let column = |get: &dyn Fn(&FitResult) -> f64| -> Vec<f64> { kept.iter().map(get).collect() };
    let beta_intervals = (0..p)
        .map(|k| percentile_interval(&column(&|f| f.params.beta()[k]), bcfg.level))
        .collect::<Result<Vec<_>>>()?;
    let sigma2_interval = percentile_interval(&sigma2_draws, bcfg.level)?;
    let r_vech_intervals = (0..q * (q + 1) / 2)
        .map(|k| percentile_interval(&column(&|f| f.params.vech_r()[k]), bcfg.level))
        .collect::<Result<Vec<_>>>()?;
    let ranef_intervals = (0..m)
        .map(|i| {
            (0..q)
                .map(|k| percentile_interval(&column(&|f| f.ranef.cluster(i)[k]), bcfg.level))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(BootstrapResult {
        beta_draws,
        sigma2_draws,
        r_vech_draws,
        ranef_draws,
        beta_intervals,
        sigma2_interval,
        r_vech_intervals,
        ranef_intervals,
        level: bcfg.level,
        dropped,
    })
}

/// Percentile interval at `level`: the `(1-level)/2` and `(1+level)/2`
/// empirical quantiles of the draws.
pub fn percentile_interval(draws: &[f64], level: f64) -> Result<ParameterInterval> {
    if draws.is_empty() {
        return Err(Error::InvalidData("no draws to form an interval from".into()));
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("draws must not contain NaN"));
    Ok(ParameterInterval {
        lower: quantile_type7(&sorted, (1.0 - level) / 2.0),
        upper: quantile_type7(&sorted, (1.0 + level) / 2.0),
    })
}

/// Order-statistic quantile with linear interpolation (the common "type 7"
/// rule: index `h = (n-1) p`, interpolating between the straddling order
/// statistics). Documented so oracle tests are exact.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}
