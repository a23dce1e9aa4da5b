//! MM iteration with closed-form updates for fitting the model by
//! hierarchical gamma-divergence, and stationarity diagnostics against the
//! weighted estimating equations.
//!
//! Update order per iteration: weights -> beta -> b -> sigma2 -> R, with the
//! fresh beta feeding the b update and weights frozen within the iteration.
//! The sigma2 and R updates are fixed-point steps evaluated at the previous
//! iterate's marginal covariances; when a step leaves the feasible region or
//! fails to improve the minorization surrogate, a backtracking line search
//! from the previous value toward the proposal restores the ascent property.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{
    check_dims, marginal_factors, vech, Dataset, MarginalFactor, ModelParams, RandomEffects,
    SpdFactor,
};
use crate::objective::{
    check_xi, compute_weights_xi, minorization_with, objective_xi_with, DensityWeights,
};

/// Scaled estimating-equation norm required of a converged fit.
pub(crate) const STATIONARITY_TOL: f64 = 1e-6;

/// Eigenvalue floor applied to the updated random-effects covariance.
const R_EIGENVALUE_FLOOR: f64 = 1e-8;

/// Smallest admissible error variance from a fixed-point update.
const SIGMA2_MIN: f64 = 1e-12;

/// Starting point for the MM iteration.
#[derive(Debug, Clone)]
pub enum Init {
    /// Ordinary least squares for beta, zero random effects, moment-based
    /// variance starts.
    Ols,
    /// Warm start from a previous solution.
    Provided(ModelParams, RandomEffects),
}

/// Fitting configuration.
#[derive(Debug, Clone)]
pub struct FitConfig {
    /// Robustness parameter; zero fits by maximum likelihood.
    pub gamma: f64,
    /// Relative objective-change stopping threshold.
    pub tol: f64,
    /// Iteration cap; exceeding it yields `converged = false`, not an error.
    pub max_iter: usize,
    pub init: Init,
}

impl FitConfig {
    pub fn new(gamma: f64) -> Self {
        Self { gamma, tol: 1e-8, max_iter: 1000, init: Init::Ols }
    }

    /// Maximum-likelihood configuration (`gamma = 0`).
    pub fn ml() -> Self {
        Self::new(0.0)
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "gamma must be finite and nonnegative, got {}",
                self.gamma
            )));
        }
        if !self.tol.is_finite() || self.tol <= 0.0 {
            return Err(Error::InvalidConfig(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Outcome of an MM fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub ranef: RandomEffects,
    /// Objective value at the start and after each iteration; nondecreasing.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub gamma: f64,
    /// Iterations where a variance update needed backtracking or was skipped.
    pub safeguarded_steps: usize,
}

/// OLS-based starting point: beta from the pooled normal equations, b = 0,
/// sigma2 the residual mean square (floored at 1e-8), and R a diagonal
/// matrix from the variance of per-cluster mean residuals (floored at 1e-4).
pub fn init_params(data: &Dataset) -> Result<(ModelParams, RandomEffects)> {
    let p = data.p();
    let mut gram = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    for c in data.clusters() {
        gram += c.x().transpose() * c.x();
        rhs += c.x().transpose() * c.y();
    }
    let chol = nalgebra::Cholesky::new(gram).ok_or_else(|| Error::RankDeficient {
        what: "fixed-effect Gram matrix X'X".into(),
    })?;
    let beta = chol.solve(&rhs);

    let n = data.n_total();
    let mut rss = 0.0;
    let mut cluster_means = Vec::with_capacity(data.m());
    for c in data.clusters() {
        let resid = c.y() - c.x() * &beta;
        rss += resid.norm_squared();
        cluster_means.push(resid.mean());
    }
    let dof = n.saturating_sub(p).max(1) as f64;
    let sigma2 = (rss / dof).max(1e-8);

    let mean_of_means = cluster_means.iter().sum::<f64>() / data.m() as f64;
    let var = if data.m() > 1 {
        cluster_means.iter().map(|r| (r - mean_of_means).powi(2)).sum::<f64>()
            / (data.m() - 1) as f64
    } else {
        0.0
    };
    let r = DMatrix::from_diagonal_element(data.q(), data.q(), var.max(1e-4));

    let params = ModelParams::new(beta, sigma2, r)?;
    Ok((params, RandomEffects::zeros(data.m(), data.q())))
}

/// Weighted least-squares update for beta given the current random effects.
pub fn update_beta(
    data: &Dataset,
    ranef: &RandomEffects,
    weights: &DensityWeights,
) -> Result<DVector<f64>> {
    let p = data.p();
    let mut gram = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    for (i, c) in data.clusters().iter().enumerate() {
        let target = c.y() - c.z() * ranef.cluster(i);
        let wi = weights.w(i);
        let mut xw = c.x().clone();
        for j in 0..c.n() {
            xw.row_mut(j).scale_mut(wi[j]);
        }
        gram += xw.transpose() * c.x();
        rhs += xw.transpose() * target;
    }
    let chol = nalgebra::Cholesky::new(gram).ok_or_else(|| Error::RankDeficient {
        what: "weighted fixed-effect Gram matrix".into(),
    })?;
    Ok(chol.solve(&rhs))
}

/// Ridge update for each cluster's random effects given the fresh beta and
/// the previous iterate's `(sigma2, R)`.
///
/// A cluster whose observation and cluster weights have all underflowed to
/// zero imposes no constraint; its effect is set to zero.
pub fn update_ranef(
    data: &Dataset,
    beta: &DVector<f64>,
    params: &ModelParams,
    weights: &DensityWeights,
) -> Result<RandomEffects> {
    let rf = SpdFactor::new(params.r(), "R")?;
    let r_inv = rf.inverse();
    let q = data.q();
    let mut out = Vec::with_capacity(data.m());
    for (i, c) in data.clusters().iter().enumerate() {
        let wi = weights.w(i);
        let mut system = &r_inv * (weights.u()[i] * params.sigma2());
        let mut rhs = DVector::zeros(q);
        let target = c.y() - c.x() * beta;
        let mut zw = c.z().clone();
        for j in 0..c.n() {
            zw.row_mut(j).scale_mut(wi[j]);
        }
        system += zw.transpose() * c.z();
        rhs += zw.transpose() * target;
        match nalgebra::Cholesky::new(system.clone()) {
            Some(chol) => out.push(chol.solve(&rhs)),
            None if system.amax() == 0.0 && rhs.amax() == 0.0 => out.push(DVector::zeros(q)),
            None => {
                return Err(Error::RankDeficient {
                    what: format!("random-effect system of cluster `{}`", c.id()),
                })
            }
        }
    }
    RandomEffects::new(out)
}

/// Fixed-point updates for `(sigma2, R)` from the previous iterate, with R
/// symmetrized and eigenvalue-floored. Infeasible steps (nonpositive sigma2
/// denominator, non-finite result) are reported as errors so the caller can
/// fall back to a safeguarded step.
pub fn update_variances(
    data: &Dataset,
    beta: &DVector<f64>,
    ranef: &RandomEffects,
    params_prev: &ModelParams,
    weights: &DensityWeights,
    cfg: &FitConfig,
) -> Result<(f64, DMatrix<f64>)> {
    cfg.validate()?;
    let factors = marginal_factors(data, params_prev)?;
    let (s2, r) =
        variance_proposals(data, beta, ranef, params_prev, weights, cfg.gamma, &factors);
    Ok((s2?, r?))
}

fn variance_proposals(
    data: &Dataset,
    beta: &DVector<f64>,
    ranef: &RandomEffects,
    params_prev: &ModelParams,
    weights: &DensityWeights,
    gamma: f64,
    factors: &[MarginalFactor],
) -> (Result<f64>, Result<DMatrix<f64>>) {
    let n = data.n_total() as f64;
    let m = data.m() as f64;
    let q = data.q();

    let mut wss = 0.0;
    for (i, c) in data.clusters().iter().enumerate() {
        let resid = c.y() - c.x() * beta - c.z() * ranef.cluster(i);
        let wi = weights.w(i);
        for j in 0..c.n() {
            wss += wi[j] * resid[j] * resid[j];
        }
    }
    let tr_sum: f64 = factors.iter().map(|f| f.tr_inv()).sum();
    let denom = params_prev.sigma2() * tr_sum - n * gamma / (1.0 + gamma);
    let sigma2 = if denom <= 0.0 {
        Err(Error::VarianceUpdate(format!(
            "sigma2 update denominator {denom} is not positive"
        )))
    } else {
        let s2 = wss / denom;
        if s2.is_finite() && s2 > SIGMA2_MIN {
            Ok(s2)
        } else {
            Err(Error::VarianceUpdate(format!("sigma2 update produced {s2}")))
        }
    };

    let mut bb = DMatrix::zeros(q, q);
    for (i, b) in ranef.all().iter().enumerate() {
        bb.ger(weights.u()[i], b, b, 1.0);
    }
    let mut g = DMatrix::zeros(q, q);
    for f in factors {
        g += f.zt_sigma_inv_z();
    }
    let r_prev = params_prev.r();
    let raw = (bb - r_prev * (&g * r_prev) + m * r_prev) * ((1.0 + gamma) / m);
    let sym = (&raw + raw.transpose()) * 0.5;
    let r = floor_spd(sym);

    (sigma2, r)
}

/// Symmetrize has already happened; clamp eigenvalues at the floor when the
/// matrix is not safely positive definite.
fn floor_spd(sym: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !sym.iter().all(|v| v.is_finite()) {
        return Err(Error::VarianceUpdate("R update produced non-finite entries".into()));
    }
    let q = sym.nrows();
    let shifted = &sym - DMatrix::from_diagonal_element(q, q, R_EIGENVALUE_FLOOR);
    if nalgebra::Cholesky::new(shifted).is_some() {
        return Ok(sym);
    }
    let eig = sym.symmetric_eigen();
    let clamped = DVector::from_iterator(
        q,
        eig.eigenvalues.iter().map(|&l| l.max(R_EIGENVALUE_FLOOR)),
    );
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    let rebuilt = (&rebuilt + rebuilt.transpose()) * 0.5;
    if nalgebra::Cholesky::new(rebuilt.clone()).is_none() {
        return Err(Error::VarianceUpdate("R update is not positive definite after flooring".into()));
    }
    Ok(rebuilt)
}

/// Fits by maximizing the hierarchical gamma-divergence (`gamma > 0`) or the
/// modified joint log-likelihood (`gamma = 0`).
///
/// Non-convergence within `max_iter` is reported through
/// `FitResult::converged`, not as an error.
pub fn fit_hgd(data: &Dataset, cfg: &FitConfig) -> Result<FitResult> {
    let ones = DVector::from_element(data.m(), 1.0);
    fit_driver(data, &ones, cfg)
}

pub(crate) fn fit_driver(
    data: &Dataset,
    xi: &DVector<f64>,
    cfg: &FitConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    check_xi(data, xi)?;
    let gamma = cfg.gamma;
    let (mut params, mut ranef) = match &cfg.init {
        Init::Ols => init_params(data)?,
        Init::Provided(p, b) => {
            check_dims(data, p)?;
            (p.clone(), b.clone())
        }
    };

    let mut factors = marginal_factors(data, &params)?;
    let mut rf = SpdFactor::new(params.r(), "R")?;
    let mut objective = objective_xi_with(data, &params, &ranef, gamma, xi, &factors, &rf);
    let mut trace = vec![objective];
    let mut converged = false;
    let mut safeguarded_steps = 0usize;
    let mut iterations = 0usize;

    for iter in 1..=cfg.max_iter {
        iterations = iter;
        let weights = compute_weights_xi(data, &params, &ranef, gamma, xi)?;
        let beta_new = update_beta(data, &ranef, &weights)?;
        let ranef_new = update_ranef(data, &beta_new, &params, &weights)?;

        let base = ModelParams::new_unchecked(beta_new.clone(), params.sigma2(), params.r().clone());
        let surrogate_ref =
            minorization_with(data, &base, &ranef_new, &weights, gamma, &factors, &rf);
        let (s2_prop, r_prop) =
            variance_proposals(data, &beta_new, &ranef_new, &params, &weights, gamma, &factors);
        let mut safeguarded = s2_prop.is_err() || r_prop.is_err();
        let s2_target = s2_prop.unwrap_or(params.sigma2());
        let r_target = r_prop.unwrap_or_else(|_| params.r().clone());

        // Largest step toward the proposal that does not decrease the surrogate.
        let mut accepted: Option<(ModelParams, Vec<MarginalFactor>, SpdFactor)> = None;
        let mut alpha = 1.0;
        while alpha >= 2.0_f64.powi(-30) {
            let s2 = params.sigma2() + alpha * (s2_target - params.sigma2());
            let r = params.r() + (&r_target - params.r()) * alpha;
            let cand = ModelParams::new_unchecked(beta_new.clone(), s2, r);
            if let (Ok(cf), Ok(crf)) =
                (marginal_factors(data, &cand), SpdFactor::new(cand.r(), "R"))
            {
                let val = minorization_with(data, &cand, &ranef_new, &weights, gamma, &cf, &crf);
                if val >= surrogate_ref {
                    accepted = Some((cand, cf, crf));
                    break;
                }
            }
            safeguarded = true;
            alpha *= 0.5;
        }
        match accepted {
            Some((cand, cf, crf)) => {
                params = cand;
                factors = cf;
                rf = crf;
            }
            None => {
                // Keep the previous variance block; the iteration still
                // improved beta and b, so the surrogate has not decreased.
                params = base;
                safeguarded = true;
            }
        }
        ranef = ranef_new;
        if safeguarded {
            safeguarded_steps += 1;
        }

        let objective_new = objective_xi_with(data, &params, &ranef, gamma, xi, &factors, &rf);
        trace.push(objective_new);
        let delta = (objective_new - objective).abs() / (1.0 + objective_new.abs());
        objective = objective_new;
        if delta < cfg.tol {
            let score = wee_residuals_xi(data, &params, &ranef, gamma, xi)?;
            if score.amax() <= STATIONARITY_TOL {
                converged = true;
                break;
            }
        }
    }

    Ok(FitResult {
        params,
        ranef,
        objective_trace: trace,
        iterations,
        converged,
        gamma,
        safeguarded_steps,
    })
}

/// Stacked, size-scaled left-hand sides of the weighted estimating equations:
/// the beta block, all m random-effect blocks, and the sigma2 and R score
/// equations. Zero (to tolerance) exactly at a stationary point.
pub fn wee_residuals(
    data: &Dataset,
    params: &ModelParams,
    ranef: &RandomEffects,
    cfg: &FitConfig,
) -> Result<DVector<f64>> {
    cfg.validate()?;
    let ones = DVector::from_element(data.m(), 1.0);
    wee_residuals_xi(data, params, ranef, cfg.gamma, &ones)
}

pub(crate) fn wee_residuals_xi(
    data: &Dataset,
    params: &ModelParams,
    ranef: &RandomEffects,
    gamma: f64,
    xi: &DVector<f64>,
) -> Result<DVector<f64>> {
    let weights = compute_weights_xi(data, params, ranef, gamma, xi)?;
    let factors = marginal_factors(data, params)?;
    let rf = SpdFactor::new(params.r(), "R")?;
    let n = data.n_total() as f64;
    let m = data.m() as f64;
    let q = data.q();
    let p = data.p();
    let sigma2 = params.sigma2();

    let mut out = Vec::with_capacity(p + data.m() * q + 1 + q * (q + 1) / 2);
    let mut beta_block = DVector::zeros(p);
    let mut b_blocks = Vec::with_capacity(data.m());
    let mut wss = 0.0;
    for (i, c) in data.clusters().iter().enumerate() {
        let resid = c.y() - c.x() * params.beta() - c.z() * ranef.cluster(i);
        let wi = weights.w(i);
        let mut wr = resid.clone();
        for j in 0..c.n() {
            wr[j] *= wi[j];
            wss += wi[j] * resid[j] * resid[j];
        }
        beta_block += c.x().transpose() * &wr;
        let block = (c.z().transpose() * &wr) / sigma2
            - rf.solve(ranef.cluster(i)) * weights.u()[i];
        b_blocks.push(block / c.n() as f64);
    }
    beta_block /= n;
    out.extend(beta_block.iter());
    for b in &b_blocks {
        out.extend(b.iter());
    }

    let tr_sum: f64 = factors.iter().map(|f| f.tr_inv()).sum();
    let s2_score = wss / (2.0 * sigma2 * sigma2)
        + n * gamma / (2.0 * (1.0 + gamma) * sigma2)
        - 0.5 * tr_sum;
    out.push(s2_score / n);

    let mut r_score = DMatrix::zeros(q, q);
    for (i, b) in ranef.all().iter().enumerate() {
        let s = rf.solve(b);
        r_score.ger(0.5 * weights.u()[i], &s, &s, 1.0);
    }
    r_score += rf.inverse() * (m * gamma / (2.0 * (1.0 + gamma)));
    for f in &factors {
        r_score -= f.zt_sigma_inv_z() * 0.5;
    }
    for v in vech(&r_score) {
        out.push(v / m);
    }
    Ok(DVector::from_vec(out))
}
