//! Independent-cluster linear mixed model data structures and the classical
//! (non-robust) quantities: marginal covariance, marginal log-likelihood,
//! modified joint log-likelihood and the BLUP.
//!
//! The model is `y_ij = x_ij' beta + z_ij' b_i + eps_ij` with `b_i ~ N(0, R)`
//! and `eps_ij ~ N(0, sigma2)`. Clusters are independent; all quantities here
//! are pure functions of immutable inputs.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Response and design matrices for one cluster.
#[derive(Debug, Clone)]
pub struct ClusterData {
    id: String,
    y: DVector<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
}

impl ClusterData {
    /// Builds a cluster, checking that `y`, `x`, `z` have the same number of
    /// rows, at least one observation, and only finite entries.
    pub fn new(
        id: impl Into<String>,
        y: DVector<f64>,
        x: DMatrix<f64>,
        z: DMatrix<f64>,
    ) -> Result<Self> {
        let id = id.into();
        let n = y.len();
        if n == 0 {
            return Err(Error::InvalidData(format!("cluster `{id}` has no observations")));
        }
        if x.nrows() != n || z.nrows() != n {
            return Err(Error::DimensionMismatch {
                cluster: id,
                detail: format!(
                    "y has {n} rows but X has {} and Z has {}",
                    x.nrows(),
                    z.nrows()
                ),
            });
        }
        if x.ncols() == 0 || z.ncols() == 0 {
            return Err(Error::InvalidData(format!(
                "cluster `{id}` has an empty design matrix (p={}, q={})",
                x.ncols(),
                z.ncols()
            )));
        }
        let finite = y.iter().all(|v| v.is_finite())
            && x.iter().all(|v| v.is_finite())
            && z.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidData(format!("cluster `{id}` contains non-finite values")));
        }
        Ok(Self { id, y, x, z })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Number of observations in this cluster.
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    /// Fixed-effect design, one row per observation.
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Random-effect design, one row per observation.
    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }
}

/// An ordered collection of clusters with common covariate dimensions.
#[derive(Debug, Clone)]
pub struct Dataset {
    clusters: Vec<ClusterData>,
    n_total: usize,
    p: usize,
    q: usize,
}

impl Dataset {
    pub fn new(clusters: Vec<ClusterData>) -> Result<Self> {
        let first = clusters
            .first()
            .ok_or_else(|| Error::InvalidData("dataset has no clusters".into()))?;
        let (p, q) = (first.x.ncols(), first.z.ncols());
        let mut n_total = 0;
        for c in &clusters {
            if c.x.ncols() != p || c.z.ncols() != q {
                return Err(Error::DimensionMismatch {
                    cluster: c.id.clone(),
                    detail: format!(
                        "covariate dimensions ({}, {}) differ from the first cluster ({p}, {q})",
                        c.x.ncols(),
                        c.z.ncols()
                    ),
                });
            }
            n_total += c.n();
        }
        Ok(Self { clusters, n_total, p, q })
    }

    pub fn clusters(&self) -> &[ClusterData] {
        &self.clusters
    }

    /// Number of clusters `m`.
    pub fn m(&self) -> usize {
        self.clusters.len()
    }

    /// Total number of observations `N`.
    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }
}

/// Model parameters `theta = (beta, sigma2, R)`.
#[derive(Debug, Clone)]
pub struct ModelParams {
    beta: DVector<f64>,
    sigma2: f64,
    r: DMatrix<f64>,
}

impl ModelParams {
    /// Validates `sigma2 > 0` and `R` symmetric positive definite.
    pub fn new(beta: DVector<f64>, sigma2: f64, r: DMatrix<f64>) -> Result<Self> {
        if !beta.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidData("beta contains non-finite values".into()));
        }
        if !sigma2.is_finite() || sigma2 <= 0.0 {
            return Err(Error::InvalidData(format!("sigma2 must be positive, got {sigma2}")));
        }
        if r.nrows() != r.ncols() || r.is_empty() {
            return Err(Error::InvalidData("R must be a non-empty square matrix".into()));
        }
        if !r.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidData("R contains non-finite values".into()));
        }
        let scale = 1.0 + r.amax();
        for i in 0..r.nrows() {
            for j in 0..i {
                if (r[(i, j)] - r[(j, i)]).abs() > 1e-8 * scale {
                    return Err(Error::InvalidData("R is not symmetric".into()));
                }
            }
        }
        if Cholesky::new(r.clone()).is_none() {
            return Err(Error::NotPositiveDefinite { what: "R".into() });
        }
        Ok(Self { beta, sigma2, r })
    }

    /// Builds parameters without validating the SPD invariant.
    ///
    /// Intended for tests exercising degenerate cases (e.g. `R = 0`);
    /// production code must use [`ModelParams::new`].
    pub fn new_unchecked(beta: DVector<f64>, sigma2: f64, r: DMatrix<f64>) -> Self {
        Self { beta, sigma2, r }
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    pub fn q(&self) -> usize {
        self.r.nrows()
    }

    /// Half-vectorization of `R` (lower triangle, stacked by column).
    pub fn vech_r(&self) -> Vec<f64> {
        vech(&self.r)
    }
}

/// The stacked random effects `b = (b_1, ..., b_m)`, one `q`-vector per cluster.
#[derive(Debug, Clone)]
pub struct RandomEffects {
    b: Vec<DVector<f64>>,
}

impl RandomEffects {
    pub fn new(b: Vec<DVector<f64>>) -> Result<Self> {
        if b.is_empty() {
            return Err(Error::InvalidData("random effects are empty".into()));
        }
        let q = b[0].len();
        for (i, bi) in b.iter().enumerate() {
            if bi.len() != q {
                return Err(Error::InvalidData(format!(
                    "random effect {i} has length {} but expected {q}",
                    bi.len()
                )));
            }
            if !bi.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidData(format!("random effect {i} is non-finite")));
            }
        }
        Ok(Self { b })
    }

    pub fn zeros(m: usize, q: usize) -> Self {
        Self { b: vec![DVector::zeros(q); m] }
    }

    pub fn all(&self) -> &[DVector<f64>] {
        &self.b
    }

    pub fn cluster(&self, i: usize) -> &DVector<f64> {
        &self.b[i]
    }

    pub fn m(&self) -> usize {
        self.b.len()
    }
}

/// Lower-triangle half-vectorization, stacked by column.
pub fn vech(m: &DMatrix<f64>) -> Vec<f64> {
    let q = m.nrows();
    let mut out = Vec::with_capacity(q * (q + 1) / 2);
    for c in 0..q {
        for r in c..q {
            out.push(m[(r, c)]);
        }
    }
    out
}

/// Scalar Gaussian log-density of a residual under variance `sigma2`.
#[inline]
pub(crate) fn ln_phi(resid: f64, sigma2: f64) -> f64 {
    -0.5 * (LN_2PI + sigma2.ln()) - resid * resid / (2.0 * sigma2)
}

/// Cholesky factor of a symmetric positive-definite matrix together with its
/// log-determinant. Solves reuse the factorization; the inverse is never
/// materialized except where a trace or explicit inverse is required.
#[derive(Debug, Clone)]
pub(crate) struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    logdet: f64,
    dim: usize,
}

impl SpdFactor {
    pub(crate) fn new(m: &DMatrix<f64>, what: &str) -> Result<Self> {
        let dim = m.nrows();
        let chol = Cholesky::new(m.clone())
            .ok_or_else(|| Error::NotPositiveDefinite { what: what.to_string() })?;
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self { chol, logdet, dim })
    }

    pub(crate) fn logdet(&self) -> f64 {
        self.logdet
    }

    pub(crate) fn dim(&self) -> usize {
        self.dim
    }

    pub(crate) fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    pub(crate) fn solve_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(m)
    }

    /// `v' A^{-1} v`.
    pub(crate) fn quad_form(&self, v: &DVector<f64>) -> f64 {
        self.chol.solve(v).dot(v)
    }

    pub(crate) fn tr_inv(&self) -> f64 {
        self.chol.inverse().trace()
    }

    pub(crate) fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Log-density of a `q`-variate normal `N(0, R)` evaluated at `b`,
/// with `R` supplied as a prefactorized [`SpdFactor`].
#[inline]
pub(crate) fn ln_phi_q(b: &DVector<f64>, rf: &SpdFactor) -> f64 {
    -0.5 * (rf.dim() as f64 * LN_2PI + rf.logdet() + rf.quad_form(b))
}

/// Marginal covariance of one cluster, `Sigma_i = Z_i R Z_i' + sigma2 I`.
pub fn marginal_covariance(cluster: &ClusterData, params: &ModelParams) -> Result<DMatrix<f64>> {
    if cluster.z().ncols() != params.q() {
        return Err(Error::DimensionMismatch {
            cluster: cluster.id().to_string(),
            detail: format!(
                "Z has {} columns but R is {}x{}",
                cluster.z().ncols(),
                params.q(),
                params.q()
            ),
        });
    }
    let z = cluster.z();
    let mut sigma = z * params.r() * z.transpose();
    for i in 0..sigma.nrows() {
        sigma[(i, i)] += params.sigma2();
    }
    Ok(sigma)
}

/// Per-cluster marginal covariance in factored form.
///
/// `Sigma = sigma2 I + Z R Z'` is handled through the q x q capacitance
/// matrix `K = R^{-1} + Z'Z / sigma2`: determinants, traces, quadratic forms
/// and solves against `Sigma` all reduce to solves against the Cholesky
/// factor of `K`, and `Sigma^{-1}` is never formed.
#[derive(Debug, Clone)]
pub(crate) struct MarginalFactor {
    n: usize,
    sigma2: f64,
    ztz: DMatrix<f64>,
    k_chol: Cholesky<f64, Dyn>,
    logdet: f64,
}

impl MarginalFactor {
    pub(crate) fn new(cluster: &ClusterData, params: &ModelParams, rf: &SpdFactor) -> Result<Self> {
        let sigma2 = params.sigma2();
        if sigma2 <= 0.0 {
            return Err(Error::SingularMarginalCovariance { cluster: cluster.id().to_string() });
        }
        let ztz = cluster.z().transpose() * cluster.z();
        let k = rf.inverse() + &ztz / sigma2;
        let k_chol = Cholesky::new(k).ok_or_else(|| Error::SingularMarginalCovariance {
            cluster: cluster.id().to_string(),
        })?;
        let logdet_k =
            2.0 * k_chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let logdet = cluster.n() as f64 * sigma2.ln() + rf.logdet() + logdet_k;
        Ok(Self { n: cluster.n(), sigma2, ztz, k_chol, logdet })
    }

    pub(crate) fn logdet(&self) -> f64 {
        self.logdet
    }

    /// `tr(Sigma^{-1}) = n/sigma2 - tr(K^{-1} Z'Z)/sigma2^2`.
    pub(crate) fn tr_inv(&self) -> f64 {
        let s = self.k_chol.solve(&self.ztz);
        self.n as f64 / self.sigma2 - s.trace() / (self.sigma2 * self.sigma2)
    }

    /// `v' Sigma^{-1} v` for a residual vector of this cluster.
    pub(crate) fn quad_form(&self, z: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
        let w = z.transpose() * v;
        v.norm_squared() / self.sigma2
            - self.k_chol.solve(&w).dot(&w) / (self.sigma2 * self.sigma2)
    }

    /// `Z' Sigma^{-1} v`.
    pub(crate) fn zt_sigma_inv(&self, z: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
        let w = z.transpose() * v;
        &w / self.sigma2 - &self.ztz * self.k_chol.solve(&w) / (self.sigma2 * self.sigma2)
    }

    /// `Z' Sigma^{-1} Z`, symmetrized.
    pub(crate) fn zt_sigma_inv_z(&self) -> DMatrix<f64> {
        let s = &self.ztz / self.sigma2
            - &self.ztz * self.k_chol.solve(&self.ztz) / (self.sigma2 * self.sigma2);
        (&s + s.transpose()) * 0.5
    }
}

/// Factorized marginal covariances for every cluster at the given parameters.
pub(crate) fn marginal_factors(data: &Dataset, params: &ModelParams) -> Result<Vec<MarginalFactor>> {
    let rf = SpdFactor::new(params.r(), "R")?;
    data.clusters().iter().map(|c| MarginalFactor::new(c, params, &rf)).collect()
}

/// Marginal log-likelihood, the sum of per-cluster multivariate normal
/// log-densities of `y_i` with mean `X_i beta` and covariance `Sigma_i`.
pub fn marginal_loglik(data: &Dataset, params: &ModelParams) -> Result<f64> {
    check_dims(data, params)?;
    let rf = SpdFactor::new(params.r(), "R")?;
    let mut total = 0.0;
    for c in data.clusters() {
        let f = MarginalFactor::new(c, params, &rf)?;
        let resid = c.y() - c.x() * params.beta();
        total += -0.5 * (c.n() as f64 * LN_2PI + f.logdet() + f.quad_form(c.z(), &resid));
    }
    Ok(total)
}

/// Modified joint log-likelihood whose joint maximizer over `(theta, b)` is
/// the maximum-likelihood estimate together with its BLUP.
///
/// The first two terms are the full joint log-likelihood of responses and
/// random effects; the remaining three make profiling over `b` reproduce the
/// marginal log-likelihood up to a constant.
pub fn joint_modified_loglik(
    data: &Dataset,
    params: &ModelParams,
    ranef: &RandomEffects,
) -> Result<f64> {
    check_dims(data, params)?;
    check_ranef(data, ranef)?;
    let rf = SpdFactor::new(params.r(), "R")?;
    let mut term_cond = 0.0;
    let mut term_logdet = 0.0;
    for (i, c) in data.clusters().iter().enumerate() {
        let f = MarginalFactor::new(c, params, &rf)?;
        term_logdet += f.logdet();
        let resid = c.y() - c.x() * params.beta() - c.z() * ranef.cluster(i);
        for j in 0..c.n() {
            term_cond += ln_phi(resid[j], params.sigma2());
        }
    }
    let term_ranef: f64 = ranef.all().iter().map(|b| ln_phi_q(b, &rf)).sum();
    let n = data.n_total() as f64;
    let m = data.m() as f64;
    Ok(term_cond + term_ranef - 0.5 * term_logdet
        + 0.5 * n * params.sigma2().ln()
        + 0.5 * m * rf.logdet())
}

/// Best linear unbiased predictor `b_i = R Z_i' Sigma_i^{-1} (y_i - X_i beta)`.
pub fn blup(data: &Dataset, params: &ModelParams) -> Result<RandomEffects> {
    check_dims(data, params)?;
    let rf = SpdFactor::new(params.r(), "R")?;
    let mut out = Vec::with_capacity(data.m());
    for c in data.clusters() {
        let f = MarginalFactor::new(c, params, &rf)?;
        let resid = c.y() - c.x() * params.beta();
        out.push(params.r() * f.zt_sigma_inv(c.z(), &resid));
    }
    RandomEffects::new(out)
}

pub(crate) fn check_dims(data: &Dataset, params: &ModelParams) -> Result<()> {
    if data.p() != params.p() || data.q() != params.q() {
        return Err(Error::InvalidData(format!(
            "parameter dimensions (p={}, q={}) do not match the data (p={}, q={})",
            params.p(),
            params.q(),
            data.p(),
            data.q()
        )));
    }
    Ok(())
}

pub(crate) fn check_ranef(data: &Dataset, ranef: &RandomEffects) -> Result<()> {
    if ranef.m() != data.m() {
        return Err(Error::InvalidData(format!(
            "{} random-effect vectors supplied for {} clusters",
            ranef.m(),
            data.m()
        )));
    }
    if ranef.cluster(0).len() != data.q() {
        return Err(Error::InvalidData(format!(
            "random effects have length {} but q = {}",
            ranef.cluster(0).len(),
            data.q()
        )));
    }
    Ok(())
}
