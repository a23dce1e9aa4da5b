//! Contamination simulator and evaluation metrics.
//!
//! Reproduces the experimental protocol at desk scale: responses are
//! generated from a four-coefficient fixed-effect structure with a random
//! intercept and slope, errors and random effects are contaminated by
//! location-shifted mixtures, and fitted estimators are scored by MSE,
//! empirical coverage and the interval score. Replicates run in parallel on
//! keyed RNG substreams so a fixed seed reproduces every byte of the report.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::bootstrap::{run_bootstrap, BootstrapConfig};
use crate::error::{Error, Result};
use crate::estimator::{fit_hgd, FitConfig};
use crate::model::{vech, ClusterData, Dataset, ModelParams, RandomEffects};
use crate::tuning::{select_gamma_with, GammaGrid, TuningMode};

/// The nine contamination scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Scenario {
    S1,
    S2,
    S3,
    S4,
    S5,
    S6,
    S7,
    S8,
    S9,
}

impl Scenario {
    /// Contamination controls `(c1, c2)` for the error and random-effect levels.
    pub fn contamination(&self) -> (f64, f64) {
        match self {
            Scenario::S1 => (0.0, 0.0),
            Scenario::S2 => (0.0, 0.05),
            Scenario::S3 => (0.0, 0.1),
            Scenario::S4 => (0.05, 0.0),
            Scenario::S5 => (0.05, 0.05),
            Scenario::S6 => (0.05, 0.1),
            Scenario::S7 => (0.1, 0.0),
            Scenario::S8 => (0.1, 0.05),
            Scenario::S9 => (0.1, 0.1),
        }
    }

    pub fn all() -> [Scenario; 9] {
        use Scenario::*;
        [S1, S2, S3, S4, S5, S6, S7, S8, S9]
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Ok(Scenario::S1),
            "S2" => Ok(Scenario::S2),
            "S3" => Ok(Scenario::S3),
            "S4" => Ok(Scenario::S4),
            "S5" => Ok(Scenario::S5),
            "S6" => Ok(Scenario::S6),
            "S7" => Ok(Scenario::S7),
            "S8" => Ok(Scenario::S8),
            "S9" => Ok(Scenario::S9),
            _ => Err(Error::UnknownScenario { code: s.to_string() }),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", *self as usize + 1)
    }
}

/// Data-generating configuration. Defaults follow the simulation protocol:
/// `a = 10`, true coefficients `(0.5, 0.3, 0.5, 0.8)`, error scale 1.5,
/// unit-variance random effects with 0.3 correlation, covariate
/// correlation 0.4.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioConfig {
    pub m: usize,
    pub c1: f64,
    pub c2: f64,
    /// Outlier location shift.
    pub a: f64,
    pub beta_true: [f64; 4],
    /// Error standard deviation (the variance is its square).
    pub sigma_true: f64,
    pub r_true: [[f64; 2]; 2],
    pub covariate_corr: f64,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, m: usize, seed: u64) -> Self {
        let (c1, c2) = scenario.contamination();
        Self {
            m,
            c1,
            c2,
            a: 10.0,
            beta_true: [0.5, 0.3, 0.5, 0.8],
            sigma_true: 1.5,
            r_true: [[1.0, 0.3], [0.3, 1.0]],
            covariate_corr: 0.4,
            seed,
        }
    }

    pub fn truth(&self) -> ModelParams {
        let r = DMatrix::from_fn(2, 2, |i, j| self.r_true[i][j]);
        ModelParams::new(
            DVector::from_row_slice(&self.beta_true),
            self.sigma_true * self.sigma_true,
            r,
        )
        .expect("true parameters are valid")
    }
}

/// Cluster sizes in five equal blocks of 10, 15, 20, 25, 30. When `m` is not
/// divisible by five, clusters take the size of the nearest block.
pub fn cluster_sizes(m: usize) -> Vec<usize> {
    (0..m).map(|i| 10 + 5 * ((5 * i / m).min(4))).collect()
}

/// Covariate-dependent error contamination probability
/// `zeta_1 = 2 c1 / (1 + exp(3 - x1))`, in `[0, 2 c1)`.
pub fn contamination_prob_error(x1: f64, c1: f64) -> f64 {
    2.0 * c1 / (1.0 + (3.0 - x1).exp())
}

/// A simulated dataset with its ground truth and contamination flags.
/// Flags are diagnostics only and are never exposed to estimators.
#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub data: Dataset,
    pub truth: ModelParams,
    pub truth_ranef: RandomEffects,
    pub error_flags: Vec<Vec<bool>>,
    pub ranef_flags: Vec<bool>,
}

/// Draws one dataset: covariates from a correlated trivariate normal, random
/// effects from `N(0, R)` contaminated by `N((a, a), I)` with probability
/// `c2`, and errors from `N(0, sigma^2)` contaminated by `N(a, 1)` with the
/// covariate-dependent probability.
///
/// The draw order is fixed (per cluster: contamination flag, random effect;
/// per observation: covariates, flag, error), so a given generator state
/// yields a reproducible dataset.
pub fn simulate_dataset<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> SimulatedDataset {
    let rho = cfg.covariate_corr;
    let cov_x = DMatrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { rho });
    let l_x = nalgebra::Cholesky::new(cov_x).expect("covariate covariance is SPD").unpack();
    let r_true = DMatrix::from_fn(2, 2, |i, j| cfg.r_true[i][j]);
    let l_r = nalgebra::Cholesky::new(r_true).expect("R is SPD").unpack();
    let sizes = cluster_sizes(cfg.m);

    let mut clusters = Vec::with_capacity(cfg.m);
    let mut ranef = Vec::with_capacity(cfg.m);
    let mut error_flags = Vec::with_capacity(cfg.m);
    let mut ranef_flags = Vec::with_capacity(cfg.m);
    for (i, &n) in sizes.iter().enumerate() {
        let re_flag = rng.random::<f64>() < cfg.c2;
        let g = DVector::from_iterator(2, (0..2).map(|_| StandardNormal.sample(rng)));
        let b = if re_flag {
            DVector::from_iterator(2, g.iter().map(|gi| cfg.a + gi))
        } else {
            &l_r * g
        };

        let mut y = DVector::zeros(n);
        let mut x = DMatrix::zeros(n, 4);
        let mut z = DMatrix::zeros(n, 2);
        let mut flags = Vec::with_capacity(n);
        for j in 0..n {
            let gx = DVector::from_iterator(3, (0..3).map(|_| StandardNormal.sample(rng)));
            let covs = &l_x * gx;
            let zeta = contamination_prob_error(covs[0], cfg.c1);
            let e_flag = rng.random::<f64>() < zeta;
            let ge: f64 = StandardNormal.sample(rng);
            let eps = if e_flag { cfg.a + ge } else { cfg.sigma_true * ge };
            x[(j, 0)] = 1.0;
            x[(j, 1)] = covs[0];
            x[(j, 2)] = covs[1];
            x[(j, 3)] = covs[2];
            z[(j, 0)] = 1.0;
            z[(j, 1)] = covs[1];
            y[j] = cfg.beta_true[0]
                + cfg.beta_true[1] * covs[0]
                + cfg.beta_true[2] * covs[1]
                + cfg.beta_true[3] * covs[2]
                + b[0]
                + b[1] * covs[1]
                + eps;
            flags.push(e_flag);
        }
        clusters.push(ClusterData::new(format!("{}", i + 1), y, x, z).expect("simulated cluster"));
        ranef.push(b);
        error_flags.push(flags);
        ranef_flags.push(re_flag);
    }

    SimulatedDataset {
        data: Dataset::new(clusters).expect("simulated dataset"),
        truth: cfg.truth(),
        truth_ranef: RandomEffects::new(ranef).expect("simulated random effects"),
        error_flags,
        ranef_flags,
    }
}

/// Interval score: width plus `2/alpha` times the distance by which the truth
/// escapes the interval, with `alpha = 1 - level`.
pub fn interval_score(lower: f64, upper: f64, truth: f64, level: f64) -> Result<f64> {
    if lower > upper {
        return Err(Error::InvalidInterval { lower, upper });
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig(format!("level must lie in (0, 1), got {level}")));
    }
    let alpha = 1.0 - level;
    Ok((upper - lower)
        + (2.0 / alpha) * ((lower - truth).max(0.0) + (truth - upper).max(0.0)))
}

/// Estimators compared by the simulation harness.
#[derive(Debug, Clone)]
pub enum Method {
    /// Maximum likelihood: the gamma = 0 path of the same fitter.
    Ml,
    /// Hierarchical gamma-divergence at a fixed gamma.
    HgdFixed(f64),
    /// H-score-tuned gamma over a grid.
    HgdAdaptive(GammaGrid),
    /// Test hook: reports the true parameters as the estimate.
    #[doc(hidden)]
    TruthOracle,
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Ml => "ml".to_string(),
            Method::HgdFixed(g) => format!("hgd:{g}"),
            Method::HgdAdaptive(_) => "ahgd".to_string(),
            Method::TruthOracle => "oracle".to_string(),
        }
    }
}

/// Coverage study settings for [`run_scenario_with`].
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CoverageConfig {
    pub replicates: usize,
    pub level: f64,
}

/// Per-method aggregate metrics.
#[derive(Debug, Clone, Serialize)]
pub struct MethodReport {
    pub method: String,
    pub mse_beta: f64,
    pub mse_sigma2: f64,
    pub mse_r: f64,
    pub mse_ranef: f64,
    /// Empirical coverage per fixed-effect element, when a coverage study ran.
    pub coverage: Option<Vec<f64>>,
    /// Mean interval score per fixed-effect element.
    pub interval_score: Option<Vec<f64>>,
    /// Selected gamma per replicate (adaptive method only).
    pub gamma_selected: Vec<f64>,
    /// Replicates whose fit failed or did not converge.
    pub fit_failures: usize,
    /// Replicates whose bootstrap was unusable.
    pub bootstrap_failures: usize,
}

/// One tidy row: a metric value for one method in one replicate.
#[derive(Debug, Clone, Serialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub method: String,
    pub metric: String,
    pub value: f64,
}

/// Scenario-level report: per-method aggregates plus tidy per-replicate rows.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub m: usize,
    pub c1: f64,
    pub c2: f64,
    pub seed: u64,
    pub replicates: usize,
    pub methods: Vec<MethodReport>,
    pub records: Vec<ReplicateRecord>,
}

struct MethodOutcome {
    metrics: Option<[f64; 4]>,
    gamma: Option<f64>,
    covered: Option<Vec<bool>>,
    iscores: Option<Vec<f64>>,
    bootstrap_failed: bool,
}

/// Runs `replicates` simulated datasets through every method and aggregates
/// MSEs. Deterministic under a fixed seed.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    methods: &[Method],
    replicates: usize,
) -> Result<ScenarioReport> {
    run_scenario_with(cfg, methods, replicates, None)
}

/// As [`run_scenario`], optionally bootstrapping each divergence-based fit to
/// score interval coverage for the fixed effects. Maximum likelihood and the
/// oracle hook are excluded from the coverage study.
pub fn run_scenario_with(
    cfg: &ScenarioConfig,
    methods: &[Method],
    replicates: usize,
    coverage: Option<CoverageConfig>,
) -> Result<ScenarioReport> {
    if replicates == 0 {
        return Err(Error::InvalidConfig("simulation needs at least one replicate".into()));
    }
    if methods.is_empty() {
        return Err(Error::InvalidConfig("no methods requested".into()));
    }

    let outcomes: Vec<Vec<MethodOutcome>> = (0..replicates)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(rep as u64);
            let sim = simulate_dataset(cfg, &mut rng);
            methods
                .iter()
                .enumerate()
                .map(|(mi, method)| run_method(cfg, &sim, method, rep, mi, coverage))
                .collect()
        })
        .collect();

    let mut reports = Vec::with_capacity(methods.len());
    let mut records = Vec::new();
    for (mi, method) in methods.iter().enumerate() {
        let label = method.label();
        let mut sums = [0.0f64; 4];
        let mut ok = 0usize;
        let mut fit_failures = 0usize;
        let mut bootstrap_failures = 0usize;
        let mut gammas = Vec::new();
        let mut cover_sums: Option<Vec<f64>> = None;
        let mut cover_n = 0usize;
        let mut is_sums: Option<Vec<f64>> = None;
        for (rep, outcome) in outcomes.iter().enumerate() {
            let o = &outcome[mi];
            match o.metrics {
                Some(ms) => {
                    ok += 1;
                    for (s, v) in sums.iter_mut().zip(ms) {
                        *s += v;
                    }
                    for (name, v) in
                        ["mse_beta", "mse_sigma2", "mse_r", "mse_ranef"].iter().zip(ms)
                    {
                        records.push(ReplicateRecord {
                            replicate: rep,
                            method: label.clone(),
                            metric: name.to_string(),
                            value: v,
                        });
                    }
                }
                None => fit_failures += 1,
            }
            if let Some(g) = o.gamma {
                gammas.push(g);
                records.push(ReplicateRecord {
                    replicate: rep,
                    method: label.clone(),
                    metric: "gamma_selected".to_string(),
                    value: g,
                });
            }
            if o.bootstrap_failed {
                bootstrap_failures += 1;
            }
            if let (Some(cov), Some(is)) = (&o.covered, &o.iscores) {
                let cs = cover_sums.get_or_insert_with(|| vec![0.0; cov.len()]);
                let iss = is_sums.get_or_insert_with(|| vec![0.0; is.len()]);
                for (k, (&c, &s)) in cov.iter().zip(is.iter()).enumerate() {
                    cs[k] += if c { 1.0 } else { 0.0 };
                    iss[k] += s;
                    records.push(ReplicateRecord {
                        replicate: rep,
                        method: label.clone(),
                        metric: format!("covered_beta{k}"),
                        value: if c { 1.0 } else { 0.0 },
                    });
                    records.push(ReplicateRecord {
                        replicate: rep,
                        method: label.clone(),
                        metric: format!("interval_score_beta{k}"),
                        value: s,
                    });
                }
                cover_n += 1;
            }
        }
        let denom = ok.max(1) as f64;
        reports.push(MethodReport {
            method: label,
            mse_beta: sums[0] / denom,
            mse_sigma2: sums[1] / denom,
            mse_r: sums[2] / denom,
            mse_ranef: sums[3] / denom,
            coverage: cover_sums
                .map(|cs| cs.into_iter().map(|s| s / cover_n.max(1) as f64).collect()),
            interval_score: is_sums
                .map(|iss| iss.into_iter().map(|s| s / cover_n.max(1) as f64).collect()),
            gamma_selected: gammas,
            fit_failures,
            bootstrap_failures,
        });
    }

    Ok(ScenarioReport {
        m: cfg.m,
        c1: cfg.c1,
        c2: cfg.c2,
        seed: cfg.seed,
        replicates,
        methods: reports,
        records,
    })
}

fn run_method(
    cfg: &ScenarioConfig,
    sim: &SimulatedDataset,
    method: &Method,
    rep: usize,
    method_idx: usize,
    coverage: Option<CoverageConfig>,
) -> MethodOutcome {
    let failed = MethodOutcome {
        metrics: None,
        gamma: None,
        covered: None,
        iscores: None,
        bootstrap_failed: false,
    };
    let (params, ranef, gamma, fit) = match method {
        Method::Ml => match fit_hgd(&sim.data, &FitConfig::ml()) {
            Ok(f) if f.converged => (f.params.clone(), f.ranef.clone(), None, Some(f)),
            _ => return failed,
        },
        Method::HgdFixed(g) => match fit_hgd(&sim.data, &FitConfig::new(*g)) {
            Ok(f) if f.converged => (f.params.clone(), f.ranef.clone(), None, Some(f)),
            _ => return failed,
        },
        Method::HgdAdaptive(grid) => {
            match select_gamma_with(&sim.data, grid, &FitConfig::ml(), TuningMode::Continuation) {
                Ok((report, fits)) => {
                    let idx = report
                        .gammas
                        .iter()
                        .position(|&g| g == report.gamma_opt)
                        .expect("selected gamma is a grid value");
                    match fits.into_iter().nth(idx).flatten() {
                        Some(f) => {
                            (f.params.clone(), f.ranef.clone(), Some(report.gamma_opt), Some(f))
                        }
                        None => return failed,
                    }
                }
                Err(_) => return failed,
            }
        }
        Method::TruthOracle => (sim.truth.clone(), sim.truth_ranef.clone(), None, None),
    };

    let metrics = Some(mse_metrics(sim, &params, &ranef));
    let mut covered = None;
    let mut iscores = None;
    let mut bootstrap_failed = false;
    if let (Some(cov), Some(fit)) = (coverage, fit.as_ref()) {
        let eligible = matches!(method, Method::HgdFixed(_) | Method::HgdAdaptive(_));
        if eligible {
            let bcfg = BootstrapConfig {
                replicates: cov.replicates,
                level: cov.level,
                seed: splitmix64(
                    cfg.seed ^ (rep as u64).wrapping_mul(0x9E3779B97F4A7C15)
                        ^ ((method_idx as u64) << 32),
                ),
            };
            match run_bootstrap(&sim.data, fit, &bcfg) {
                Ok(boot) => {
                    let mut cflags = Vec::with_capacity(cfg.beta_true.len());
                    let mut scores = Vec::with_capacity(cfg.beta_true.len());
                    for (k, interval) in boot.beta_intervals.iter().enumerate() {
                        let truth = cfg.beta_true[k];
                        cflags.push(interval.lower <= truth && truth <= interval.upper);
                        scores.push(
                            interval_score(interval.lower, interval.upper, truth, cov.level)
                                .expect("bootstrap interval is ordered"),
                        );
                    }
                    covered = Some(cflags);
                    iscores = Some(scores);
                }
                Err(_) => bootstrap_failed = true,
            }
        }
    }

    MethodOutcome { metrics, gamma, covered, iscores, bootstrap_failed }
}

fn mse_metrics(
    sim: &SimulatedDataset,
    params: &ModelParams,
    ranef: &RandomEffects,
) -> [f64; 4] {
    let truth = &sim.truth;
    let mse_beta = (params.beta() - truth.beta()).norm_squared() / truth.beta().len() as f64;
    let d_s2 = params.sigma2() - truth.sigma2();
    let vh = vech(params.r());
    let vt = vech(truth.r());
    let mse_r = vh
        .iter()
        .zip(&vt)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / vt.len() as f64;
    let mut mse_b = 0.0;
    let mut count = 0usize;
    for (bh, bt) in ranef.all().iter().zip(sim.truth_ranef.all()) {
        mse_b += (bh - bt).norm_squared();
        count += bt.len();
    }
    [mse_beta, d_s2 * d_s2, mse_r, mse_b / count as f64]
}

/// SplitMix64 mixer for deriving independent bootstrap seeds.
fn splitmix64(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Writes the tidy per-replicate rows as CSV
/// (`replicate,method,metric,value`), one row per method x metric x replicate.
pub fn write_metrics_csv<W: Write>(report: &ScenarioReport, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "replicate,method,metric,value")?;
    for r in &report.records {
        writeln!(out, "{},{},{},{}", r.replicate, r.method, r.metric, r.value)?;
    }
    Ok(())
}
