//! Hyvarinen-score selection of the robustness parameter.
//!
//! Two H-scores are computed from a fitted model: one for the response level
//! and one for the random-effects level. Each is minimized over a candidate
//! grid and the selected gamma is the larger of the two argmins. The grid is
//! refit by continuation: each value warm-starts from the previous solution.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::{fit_hgd, FitConfig, FitResult, Init};
use crate::model::{ln_phi, ln_phi_q, Dataset, SpdFactor, LN_2PI};

/// Strictly increasing candidate values for gamma.
#[derive(Debug, Clone, Serialize)]
pub struct GammaGrid {
    values: Vec<f64>,
}

impl GammaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidConfig("gamma grid is empty".into()));
        }
        for w in values.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::InvalidConfig(
                    "gamma grid must be strictly increasing".into(),
                ));
            }
        }
        if !values.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::InvalidConfig(
                "gamma grid values must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { values })
    }

    /// The grid `{0, 0.05, ..., 0.50}`.
    pub fn default_grid() -> Self {
        Self { values: (0..=10).map(|i| i as f64 / 20.0).collect() }
    }

    /// Inclusive range with a fixed step, e.g. `(0, 0.2, 0.01)`.
    pub fn from_range(start: f64, end: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !start.is_finite() || !end.is_finite() || end < start {
            return Err(Error::InvalidConfig(format!(
                "invalid gamma range {start}:{end}:{step}"
            )));
        }
        let count = ((end - start) / step).round() as usize;
        let values = (0..=count)
            .map(|i| start + i as f64 * step)
            .filter(|v| *v <= end + 1e-12)
            .collect();
        Self::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// H-scores per grid value and the selected gamma.
#[derive(Debug, Clone, Serialize)]
pub struct TuningReport {
    pub gammas: Vec<f64>,
    /// Response-level H-score per grid value; `None` marks an excluded fit.
    pub h1: Vec<Option<f64>>,
    /// Random-effects H-score per grid value.
    pub h2: Vec<Option<f64>>,
    /// Argmin of the response-level score (ties broken toward smaller gamma).
    pub gamma1: f64,
    /// Argmin of the random-effects score.
    pub gamma2: f64,
    /// `max(gamma1, gamma2)`.
    pub gamma_opt: f64,
    /// Grid values whose fit failed or did not converge.
    pub excluded: Vec<f64>,
}

/// H-score associated with the response level, summed over all observations.
pub fn h_score_response(data: &Dataset, fit: &FitResult) -> Result<f64> {
    crate::model::check_dims(data, &fit.params)?;
    crate::model::check_ranef(data, &fit.ranef)?;
    let gamma = fit.gamma;
    let sigma2 = fit.params.sigma2();
    let ln_c = (gamma / (1.0 + gamma))
        * (-0.5 * (1.0 + gamma).ln() - 0.5 * gamma * (LN_2PI + sigma2.ln()));
    let c = ln_c.exp();
    let mut total = 0.0;
    for (i, cl) in data.clusters().iter().enumerate() {
        let resid = cl.y() - cl.x() * fit.params.beta() - cl.z() * fit.ranef.cluster(i);
        for j in 0..cl.n() {
            let r2 = resid[j] * resid[j];
            let pw = (gamma * ln_phi(resid[j], sigma2)).exp();
            total += 2.0 * (gamma * r2 - sigma2) / (sigma2 * sigma2 * c) * pw
                + r2 / (sigma2 * sigma2 * c * c) * pw * pw;
        }
    }
    Ok(total)
}

/// H-score associated with the random effects, summed over clusters.
/// The score uses the scalar `1_q' R^{-1} b_i`.
pub fn h_score_ranef(fit: &FitResult) -> Result<f64> {
    let gamma = fit.gamma;
    let q = fit.params.q();
    let rf = SpdFactor::new(fit.params.r(), "R")?;
    let tr_inv = rf.tr_inv();
    let ln_c = (gamma / (1.0 + gamma))
        * (-0.5 * q as f64 * (1.0 + gamma).ln()
            - 0.5 * q as f64 * gamma * LN_2PI
            - 0.5 * gamma * rf.logdet());
    let c = ln_c.exp();
    let mut total = 0.0;
    for b in fit.ranef.all() {
        let s: f64 = rf.solve(b).sum();
        let pw = (gamma * ln_phi_q(b, &rf)).exp();
        total += 2.0 * (gamma * s * s - tr_inv) / c * pw + s * s / (c * c) * pw * pw;
    }
    Ok(total)
}

/// How grid points are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TuningMode {
    /// Fit the grid in order, warm-starting each value from the previous fit.
    Continuation,
    /// Fit every grid point independently from the configured start.
    ColdParallel,
}

/// Refits the model at every grid gamma, computes both H-scores and selects
/// `gamma_opt = max(argmin H1, argmin H2)`.
///
/// Grid values whose fit fails or does not converge are excluded from the
/// argmins and listed in the report. The selected gamma is meant to be chosen
/// once and reused unchanged by any subsequent bootstrap.
pub fn select_gamma(data: &Dataset, grid: &GammaGrid, cfg: &FitConfig) -> Result<TuningReport> {
    let (report, _) = select_gamma_with(data, grid, cfg, TuningMode::Continuation)?;
    Ok(report)
}

/// As [`select_gamma`], also returning the per-grid fits (`None` for excluded
/// values) so callers can reuse the fit at the selected gamma.
pub fn select_gamma_with(
    data: &Dataset,
    grid: &GammaGrid,
    cfg: &FitConfig,
    mode: TuningMode,
) -> Result<(TuningReport, Vec<Option<FitResult>>)> {
    let fits: Vec<Option<FitResult>> = match mode {
        TuningMode::Continuation => {
            let mut out = Vec::with_capacity(grid.values().len());
            let mut warm: Option<(crate::model::ModelParams, crate::model::RandomEffects)> = None;
            for &gamma in grid.values() {
                let init = match &warm {
                    Some((p, b)) => Init::Provided(p.clone(), b.clone()),
                    None => cfg.init.clone(),
                };
                let fit_cfg = FitConfig { gamma, init, ..cfg.clone() };
                match fit_hgd(data, &fit_cfg) {
                    Ok(fit) if fit.converged => {
                        warm = Some((fit.params.clone(), fit.ranef.clone()));
                        out.push(Some(fit));
                    }
                    _ => out.push(None),
                }
            }
            out
        }
        TuningMode::ColdParallel => grid
            .values()
            .par_iter()
            .map(|&gamma| {
                let fit_cfg = FitConfig { gamma, ..cfg.clone() };
                match fit_hgd(data, &fit_cfg) {
                    Ok(fit) if fit.converged => Some(fit),
                    _ => None,
                }
            })
            .collect(),
    };

    let gammas = grid.values().to_vec();
    let mut h1 = Vec::with_capacity(gammas.len());
    let mut h2 = Vec::with_capacity(gammas.len());
    let mut excluded = Vec::new();
    for (gamma, fit) in gammas.iter().zip(&fits) {
        match fit {
            Some(f) => {
                h1.push(Some(h_score_response(data, f)?));
                h2.push(Some(h_score_ranef(f)?));
            }
            None => {
                h1.push(None);
                h2.push(None);
                excluded.push(*gamma);
            }
        }
    }
    let gamma1 = argmin_with_ties(&gammas, &h1)
        .ok_or_else(|| Error::InvalidData("no grid value produced a converged fit".into()))?;
    let gamma2 = argmin_with_ties(&gammas, &h2)
        .ok_or_else(|| Error::InvalidData("no grid value produced a converged fit".into()))?;
    let report = TuningReport {
        gammas,
        h1,
        h2,
        gamma1,
        gamma2,
        gamma_opt: gamma1.max(gamma2),
        excluded,
    };
    Ok((report, fits))
}

/// Smallest gamma attaining the minimal score; `None` if every entry is excluded.
fn argmin_with_ties(gammas: &[f64], scores: &[Option<f64>]) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for (g, s) in gammas.iter().zip(scores) {
        if let Some(s) = s {
            match best {
                Some((_, bs)) if *s >= bs => {}
                _ => best = Some((*g, *s)),
            }
        }
    }
    best.map(|(g, _)| g)
}
