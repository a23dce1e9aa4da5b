//! Hierarchical gamma-divergence, normalized powered-density weights and the
//! minorization surrogate driving the MM iteration.
//!
//! All powered densities are handled as `gamma * log phi` in log space and
//! normalized with a log-sum-exp, so extreme outliers underflow to zero
//! weight instead of poisoning the sums. `gamma = 0` dispatches to the
//! likelihood limit: unit weights and the modified joint log-likelihood.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::{
    check_dims, check_ranef, ln_phi, ln_phi_q, marginal_factors, Dataset, MarginalFactor,
    ModelParams, RandomEffects, SpdFactor,
};

/// The robustness tuning parameter `gamma >= 0`; zero is the maximum-likelihood limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaConfig {
    gamma: f64,
}

impl GammaConfig {
    pub fn new(gamma: f64) -> Result<Self> {
        if !gamma.is_finite() || gamma < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "gamma must be a finite nonnegative real, got {gamma}"
            )));
        }
        Ok(Self { gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn is_ml(&self) -> bool {
        self.gamma == 0.0
    }
}

/// Normalized model-based density weights: observation weights `w_ij` summing
/// to `N` and cluster weights `u_i` summing to `m`.
#[derive(Debug, Clone)]
pub struct DensityWeights {
    pub(crate) w: Vec<DVector<f64>>,
    pub(crate) u: DVector<f64>,
}

impl DensityWeights {
    /// Observation weights of cluster `i`.
    pub fn w(&self, i: usize) -> &DVector<f64> {
        &self.w[i]
    }

    /// Cluster-level weights.
    pub fn u(&self) -> &DVector<f64> {
        &self.u
    }

    pub fn w_sum(&self) -> f64 {
        self.w.iter().map(|wi| wi.sum()).sum()
    }

    pub fn u_sum(&self) -> f64 {
        self.u.sum()
    }
}

/// Log-sum-exp over possibly `-inf` entries (entries of weight zero).
pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Per-observation and per-cluster log powered-density terms
/// `ln xi_i + gamma * ln phi`, the shared ingredient of weights and objective.
struct LogPowerTerms {
    obs: Vec<Vec<f64>>,
    cluster: Vec<f64>,
}

fn log_power_terms(
    data: &Dataset,
    params: &ModelParams,
    ranef: &RandomEffects,
    gamma: f64,
    xi: &DVector<f64>,
    rf: &SpdFactor,
) -> LogPowerTerms {
    let mut obs = Vec::with_capacity(data.m());
    let mut cluster = Vec::with_capacity(data.m());
    for (i, c) in data.clusters().iter().enumerate() {
        let ln_xi = xi[i].ln();
        let resid = c.y() - c.x() * params.beta() - c.z() * ranef.cluster(i);
        obs.push(
            (0..c.n())
                .map(|j| ln_xi + gamma * ln_phi(resid[j], params.sigma2()))
                .collect(),
        );
        cluster.push(ln_xi + gamma * ln_phi_q(ranef.cluster(i), rf));
    }
    LogPowerTerms { obs, cluster }
}

/// Normalized density weights at the current `(theta, b)`.
///
/// At `gamma = 0` every weight is exactly one.
pub fn compute_weights(
    data: &Dataset,
    params: &ModelParams,
    ranef: &RandomEffects,
    cfg: &GammaConfig,
) -> Result<DensityWeights> {
    let ones = DVector::from_element(data.m(), 1.0);
    compute_weights_xi(data, params, ranef, cfg.gamma(), &ones)
}

/// Weights with bootstrap multipliers `xi` folded into both normalizations:
/// `w_ij ∝ xi_i phi_ij^gamma` rescaled to sum `N`, `u_i ∝ xi_i phi_q(b_i)^gamma`
/// rescaled to sum `m`. With `xi = 1` this is bit-identical to the plain path.
pub(crate) fn compute_weights_xi(
    data: &Dataset,
    params: &ModelParams,
    ranef: &RandomEffects,
    gamma: f64,
    xi: &DVector<f64>,
) -> Result<DensityWeights> {
    check_dims(data, params)?;
    check_ranef(data, ranef)?;
    check_xi(data, xi)?;
    let n = data.n_total() as f64;
    let m = data.m() as f64;

    let weights = if gamma == 0.0 {
        let sw: f64 = data
            .clusters()
            .iter()
            .enumerate()
            .map(|(i, c)| xi[i] * c.n() as f64)
            .sum();
        let su: f64 = xi.sum();
        if sw <= 0.0 || su <= 0.0 {
            return Err(Error::InvalidData("bootstrap weights sum to zero".into()));
        }
        let w = data
            .clusters()
            .iter()
            .enumerate()
            .map(|(i, c)| DVector::from_element(c.n(), xi[i] / (sw / n)))
            .collect();
        let u = xi / (su / m);
        DensityWeights { w, u }
    } else {
        let rf = SpdFactor::new(params.r(), "R")?;
        let terms = log_power_terms(data, params, ranef, gamma, xi, &rf);
        let flat: Vec<f64> = terms.obs.iter().flatten().cloned().collect();
        let log_norm_w = log_sum_exp(&flat) - n.ln();
        let log_norm_u = log_sum_exp(&terms.cluster) - m.ln();
        if !log_norm_w.is_finite() || !log_norm_u.is_finite() {
            return Err(Error::InvalidData(
                "all powered densities vanished; weights are undefined".into(),
            ));
        }
        let w = terms
            .obs
            .iter()
            .map(|lw| DVector::from_iterator(lw.len(), lw.iter().map(|l| (l - log_norm_w).exp())))
            .collect();
        let u = DVector::from_iterator(
            data.m(),
            terms.cluster.iter().map(|l| (l - log_norm_u).exp()),
        );
        DensityWeights { w, u }
    };

    debug_assert!(
        (weights.w_sum() - n).abs() <= 1e-8 * n,
        "observation weights must sum to N"
    );
    debug_assert!(
        (weights.u_sum() - m).abs() <= 1e-8 * m,
        "cluster weights must sum to m"
    );
    Ok(weights)
}

/// Hierarchical gamma-divergence at `(theta, b)`.
///
/// Normalized by the additive constant `(N + m)/gamma` so that the value
/// converges to the modified joint log-likelihood as `gamma -> 0`. The
/// constant does not affect optimization, weights, or score equations.
pub fn evaluate_hgd(
    data: &Dataset,
    params: &ModelParams,
    ranef: &RandomEffects,
    cfg: &GammaConfig,
) -> Result<f64> {
    if cfg.is_ml() {
        return Err(Error::GammaZero { op: "evaluate_hgd" });
    }
    let ones = DVector::from_element(data.m(), 1.0);
    let value = objective_xi(data, params, ranef, cfg.gamma(), &ones)?;
    let offset = (data.n_total() + data.m()) as f64 / cfg.gamma();
    Ok(value + offset)
}

/// The fitting objective without the `(N + m)/gamma` normalization:
/// the printed divergence for `gamma > 0`, the (xi-weighted) modified joint
/// log-likelihood for `gamma = 0`.
pub(crate) fn objective_xi(
    data: &Dataset,
    params: &ModelParams,
    ranef: &RandomEffects,
    gamma: f64,
    xi: &DVector<f64>,
) -> Result<f64> {
    let factors = marginal_factors(data, params)?;
    let rf = SpdFactor::new(params.r(), "R")?;
    Ok(objective_xi_with(data, params, ranef, gamma, xi, &factors, &rf))
}

pub(crate) fn objective_xi_with(
    data: &Dataset,
    params: &ModelParams,
    ranef: &RandomEffects,
    gamma: f64,
    xi: &DVector<f64>,
    factors: &[MarginalFactor],
    rf: &SpdFactor,
) -> f64 {
    let n = data.n_total() as f64;
    let m = data.m() as f64;
    let logdet_sum: f64 = factors.iter().map(|f| f.logdet()).sum();

    if gamma == 0.0 {
        // xi-weighted likelihood limit; reduces to L_J when xi = 1.
        let sw: f64 = data
            .clusters()
            .iter()
            .enumerate()
            .map(|(i, c)| xi[i] * c.n() as f64)
            .sum();
        let mut cond = 0.0;
        let mut re = 0.0;
        for (i, c) in data.clusters().iter().enumerate() {
            if xi[i] == 0.0 {
                continue;
            }
            let resid = c.y() - c.x() * params.beta() - c.z() * ranef.cluster(i);
            let s: f64 = (0..c.n()).map(|j| ln_phi(resid[j], params.sigma2())).sum();
            cond += xi[i] * s;
            re += xi[i] * ln_phi_q(ranef.cluster(i), rf);
        }
        (n / sw) * cond + re + 0.5 * n * params.sigma2().ln() + 0.5 * m * rf.logdet()
            - 0.5 * logdet_sum
    } else {
        let terms = log_power_terms(data, params, ranef, gamma, xi, rf);
        let flat: Vec<f64> = terms.obs.iter().flatten().cloned().collect();
        let coef = (1.0 + 2.0 * gamma) / (2.0 * (1.0 + gamma));
        (n / gamma) * (log_sum_exp(&flat) - n.ln())
            + coef * n * params.sigma2().ln()
            + (m / gamma) * (log_sum_exp(&terms.cluster) - m.ln())
            + coef * m * rf.logdet()
            - 0.5 * logdet_sum
    }
}

/// Minorization surrogate of the divergence, anchored at the point where
/// `weights` were computed.
///
/// The value is reported up to an additive constant that depends only on
/// `(N, m, q)`: the anchor-weight entropy terms are kept so that the offset
/// between surrogate and divergence is the same for every anchor, and only
/// the `2*pi` constants are dropped. Differences of this function are exact.
pub fn minorization_value(
    data: &Dataset,
    params: &ModelParams,
    ranef: &RandomEffects,
    weights: &DensityWeights,
    cfg: &GammaConfig,
) -> Result<f64> {
    check_dims(data, params)?;
    check_ranef(data, ranef)?;
    let factors = marginal_factors(data, params)?;
    let rf = SpdFactor::new(params.r(), "R")?;
    Ok(minorization_with(data, params, ranef, weights, cfg.gamma(), &factors, &rf))
}

pub(crate) fn minorization_with(
    data: &Dataset,
    params: &ModelParams,
    ranef: &RandomEffects,
    weights: &DensityWeights,
    gamma: f64,
    factors: &[MarginalFactor],
    rf: &SpdFactor,
) -> f64 {
    let n = data.n_total() as f64;
    let m = data.m() as f64;
    let mut wss = 0.0;
    for (i, c) in data.clusters().iter().enumerate() {
        let resid = c.y() - c.x() * params.beta() - c.z() * ranef.cluster(i);
        let wi = weights.w(i);
        for j in 0..c.n() {
            wss += wi[j] * resid[j] * resid[j];
        }
    }
    let quad_re: f64 = ranef
        .all()
        .iter()
        .zip(weights.u().iter())
        .map(|(b, &u)| u * rf.quad_form(b))
        .sum();
    let logdet_sum: f64 = factors.iter().map(|f| f.logdet()).sum();
    let coef = gamma / (2.0 * (1.0 + gamma));
    let mut value = -wss / (2.0 * params.sigma2()) - 0.5 * quad_re
        + coef * n * params.sigma2().ln()
        + coef * m * rf.logdet()
        - 0.5 * logdet_sum;
    if gamma > 0.0 {
        let xlnx = |v: f64| if v > 0.0 { v * v.ln() } else { 0.0 };
        let ent_w: f64 = weights.w.iter().map(|wi| wi.iter().map(|&w| xlnx(w)).sum::<f64>()).sum();
        let ent_u: f64 = weights.u.iter().map(|&u| xlnx(u)).sum();
        value -= (ent_w + ent_u) / gamma;
    }
    value
}

pub(crate) fn check_xi(data: &Dataset, xi: &DVector<f64>) -> Result<()> {
    if xi.len() != data.m() {
        return Err(Error::InvalidData(format!(
            "{} bootstrap weights supplied for {} clusters",
            xi.len(),
            data.m()
        )));
    }
    if xi.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::InvalidData(
            "bootstrap weights must be finite and nonnegative".into(),
        ));
    }
    Ok(())
}
