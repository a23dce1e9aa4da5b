//! Shared fixtures and independent oracles for the integration tests.
//!
//! The oracles deliberately avoid the library's own computational paths:
//! marginal covariances are assembled element by element, multivariate
//! normal densities use a hand-rolled Cholesky, and maximum-likelihood
//! reference fits come from a generic Nelder-Mead maximizer with a
//! finite-difference Newton polish.

#![allow(dead_code)]

use hgdlmm::{ClusterData, Dataset, ModelParams, RandomEffects};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// A toy dataset with its generating truth.
pub struct Toy {
    pub data: Dataset,
    pub beta: DVector<f64>,
    pub sigma2: f64,
    pub r: DMatrix<f64>,
    pub ranef: RandomEffects,
}

/// Balanced toy instance: intercept plus standard-normal covariates, random
/// intercept (and slopes), Gaussian errors with unit variance.
pub fn toy_dataset(seed: u64, m: usize, n_i: usize, p: usize, q: usize) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = DVector::from_iterator(p, (0..p).map(|_| normal(&mut rng)));
    let mut r = DMatrix::identity(q, q) * 0.8;
    for i in 0..q {
        for j in 0..i {
            r[(i, j)] = 0.3;
            r[(j, i)] = 0.3;
        }
    }
    let sigma2: f64 = 1.0;
    let l_r = nalgebra::Cholesky::new(r.clone()).unwrap().unpack();

    let mut clusters = Vec::with_capacity(m);
    let mut effects = Vec::with_capacity(m);
    for i in 0..m {
        let g = DVector::from_iterator(q, (0..q).map(|_| normal(&mut rng)));
        let b = &l_r * g;
        let mut x = DMatrix::zeros(n_i, p);
        let mut z = DMatrix::zeros(n_i, q);
        let mut y = DVector::zeros(n_i);
        for j in 0..n_i {
            x[(j, 0)] = 1.0;
            for k in 1..p {
                x[(j, k)] = normal(&mut rng);
            }
            z[(j, 0)] = 1.0;
            for k in 1..q {
                z[(j, k)] = normal(&mut rng);
            }
            let eps = sigma2.sqrt() * normal(&mut rng);
            y[j] = x.row(j).transpose().dot(&beta) + z.row(j).transpose().dot(&b) + eps;
        }
        clusters.push(ClusterData::new(format!("c{i}"), y, x, z).unwrap());
        effects.push(b);
    }
    Toy {
        data: Dataset::new(clusters).unwrap(),
        beta,
        sigma2,
        r,
        ranef: RandomEffects::new(effects).unwrap(),
    }
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Random parameters of the right shape, SPD by construction.
pub fn random_params<R: Rng + ?Sized>(rng: &mut R, p: usize, q: usize) -> ModelParams {
    let beta = DVector::from_iterator(p, (0..p).map(|_| normal(rng)));
    let sigma2 = 0.5 + rng.random::<f64>();
    let a = DMatrix::from_fn(q, q, |_, _| normal(rng));
    let r = &a * a.transpose() / q as f64 + DMatrix::identity(q, q) * 0.4;
    ModelParams::new(beta, sigma2, r).unwrap()
}

pub fn random_effects<R: Rng + ?Sized>(rng: &mut R, m: usize, q: usize) -> RandomEffects {
    RandomEffects::new(
        (0..m)
            .map(|_| DVector::from_iterator(q, (0..q).map(|_| normal(rng))))
            .collect(),
    )
    .unwrap()
}

// ---------------------------------------------------------------------------
// Element-by-element marginal covariance and hand-rolled Gaussian density.
// ---------------------------------------------------------------------------

/// `Sigma[j][k] = z_j' R z_k + sigma2 * 1{j = k}`, assembled by scalar loops.
pub fn marginal_cov_oracle(z: &DMatrix<f64>, r: &DMatrix<f64>, sigma2: f64) -> Vec<Vec<f64>> {
    let n = z.nrows();
    let q = z.ncols();
    let mut out = vec![vec![0.0; n]; n];
    for j in 0..n {
        for k in 0..n {
            let mut s = 0.0;
            for a in 0..q {
                for b in 0..q {
                    s += z[(j, a)] * r[(a, b)] * z[(k, b)];
                }
            }
            out[j][k] = s + if j == k { sigma2 } else { 0.0 };
        }
    }
    out
}

/// Hand-rolled Cholesky of a dense SPD matrix; panics if not SPD.
pub fn chol_oracle(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                assert!(s > 0.0, "oracle Cholesky: matrix not positive definite");
                l[i][j] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    l
}

fn forward_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * x[k];
        }
        x[i] = s / l[i][i];
    }
    x
}

fn backward_solve_t(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    // solves L' x = b
    let n = b.len();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    x
}

/// Solves `A x = b` given the oracle Cholesky factor of `A`.
pub fn chol_solve_oracle(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    backward_solve_t(l, &forward_solve(l, b))
}

/// Multivariate normal log-density via the oracle Cholesky.
pub fn mvn_logpdf_oracle(y: &[f64], mean: &[f64], cov: &[Vec<f64>]) -> f64 {
    let n = y.len();
    let l = chol_oracle(cov);
    let d: Vec<f64> = y.iter().zip(mean).map(|(a, b)| a - b).collect();
    let w = forward_solve(&l, &d);
    let quad: f64 = w.iter().map(|v| v * v).sum();
    let logdet: f64 = 2.0 * l.iter().enumerate().map(|(i, row)| row[i].ln()).sum::<f64>();
    -0.5 * (n as f64 * LN_2PI + logdet + quad)
}

/// Marginal log-likelihood evaluated with the oracle pieces only.
pub fn marginal_loglik_oracle(data: &Dataset, params: &ModelParams) -> f64 {
    data.clusters()
        .iter()
        .map(|c| {
            let cov = marginal_cov_oracle(c.z(), params.r(), params.sigma2());
            let mean = c.x() * params.beta();
            mvn_logpdf_oracle(c.y().as_slice(), mean.as_slice(), &cov)
        })
        .sum()
}

/// The BLUP computed with oracle pieces only.
pub fn blup_oracle(data: &Dataset, params: &ModelParams) -> RandomEffects {
    let out = data
        .clusters()
        .iter()
        .map(|c| {
            let cov = marginal_cov_oracle(c.z(), params.r(), params.sigma2());
            let l = chol_oracle(&cov);
            let resid = c.y() - c.x() * params.beta();
            let s = chol_solve_oracle(&l, resid.as_slice());
            let s = DVector::from_vec(s);
            params.r() * (c.z().transpose() * s)
        })
        .collect();
    RandomEffects::new(out).unwrap()
}

// ---------------------------------------------------------------------------
// Unconstrained parameterization and a generic numerical maximizer.
// ---------------------------------------------------------------------------

/// Packs `(beta, log sigma2, log-Cholesky of R)` into one vector.
pub fn pack_theta(params: &ModelParams) -> DVector<f64> {
    let p = params.p();
    let q = params.q();
    let l = nalgebra::Cholesky::new(params.r().clone()).expect("R must be SPD").unpack();
    let mut v = Vec::with_capacity(p + 1 + q * (q + 1) / 2);
    v.extend(params.beta().iter());
    v.push(params.sigma2().ln());
    for c in 0..q {
        v.push(l[(c, c)].ln());
        for r in c + 1..q {
            v.push(l[(r, c)]);
        }
    }
    DVector::from_vec(v)
}

pub fn unpack_theta(v: &DVector<f64>, p: usize, q: usize) -> ModelParams {
    let beta = DVector::from_iterator(p, v.iter().take(p).cloned());
    let sigma2 = v[p].exp();
    let mut l = DMatrix::zeros(q, q);
    let mut idx = p + 1;
    for c in 0..q {
        l[(c, c)] = v[idx].exp();
        idx += 1;
        for r in c + 1..q {
            l[(r, c)] = v[idx];
            idx += 1;
        }
    }
    let r = &l * l.transpose();
    let r = (&r + r.transpose()) * 0.5;
    ModelParams::new(beta, sigma2, r).expect("unpacked parameters are valid")
}

/// Nelder-Mead maximization with standard coefficients.
pub fn nelder_mead(
    f: &dyn Fn(&DVector<f64>) -> f64,
    x0: &DVector<f64>,
    scale: f64,
    max_iter: usize,
    ftol: f64,
) -> DVector<f64> {
    let n = x0.len();
    let mut simplex: Vec<DVector<f64>> = (0..=n)
        .map(|i| {
            let mut x = x0.clone();
            if i > 0 {
                x[i - 1] += scale;
            }
            x
        })
        .collect();
    let mut values: Vec<f64> = simplex.iter().map(|x| f(x)).collect();

    for _ in 0..max_iter {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
        let (best, worst) = (order[0], order[n]);
        if (values[best] - values[worst]).abs()
            < ftol * (1.0 + values[best].abs().max(values[worst].abs()))
        {
            break;
        }
        let mut centroid = DVector::zeros(n);
        for &i in order.iter().take(n) {
            centroid += &simplex[i];
        }
        centroid /= n as f64;

        let reflected = &centroid + (&centroid - &simplex[worst]);
        let f_r = f(&reflected);
        if f_r > values[best] {
            let expanded = &centroid + (&reflected - &centroid) * 2.0;
            let f_e = f(&expanded);
            if f_e > f_r {
                simplex[worst] = expanded;
                values[worst] = f_e;
            } else {
                simplex[worst] = reflected;
                values[worst] = f_r;
            }
        } else if f_r > values[order[n - 1]] {
            simplex[worst] = reflected;
            values[worst] = f_r;
        } else {
            let contracted = &centroid + (&simplex[worst] - &centroid) * 0.5;
            let f_c = f(&contracted);
            if f_c > values[worst] {
                simplex[worst] = contracted;
                values[worst] = f_c;
            } else {
                let best_point = simplex[best].clone();
                for i in 0..=n {
                    if i != best {
                        simplex[i] = (&simplex[i] + &best_point) * 0.5;
                        values[i] = f(&simplex[i]);
                    }
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..=n).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
    simplex[order[0]].clone()
}

/// Central-difference gradient.
pub fn fd_gradient(f: &dyn Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let n = x.len();
    DVector::from_iterator(
        n,
        (0..n).map(|k| {
            let hk = h * (1.0 + x[k].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += hk;
            xm[k] -= hk;
            (f(&xp) - f(&xm)) / (2.0 * hk)
        }),
    )
}

fn fd_hessian(f: &dyn Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    let step = |k: usize| h * (1.0 + x[k].abs());
    for i in 0..n {
        for j in 0..=i {
            let (hi, hj) = (step(i), step(j));
            let mut xpp = x.clone();
            let mut xpm = x.clone();
            let mut xmp = x.clone();
            let mut xmm = x.clone();
            xpp[i] += hi;
            xpp[j] += hj;
            xpm[i] += hi;
            xpm[j] -= hj;
            xmp[i] -= hi;
            xmp[j] += hj;
            xmm[i] -= hi;
            xmm[j] -= hj;
            let v = (f(&xpp) - f(&xpm) - f(&xmp) + f(&xmm)) / (4.0 * hi * hj);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

/// Newton refinement with finite-difference derivatives; each step is
/// halved until it improves `f`.
pub fn newton_polish(
    f: &dyn Fn(&DVector<f64>) -> f64,
    x0: &DVector<f64>,
    steps: usize,
) -> DVector<f64> {
    let mut x = x0.clone();
    let mut fx = f(&x);
    for _ in 0..steps {
        let g = fd_gradient(f, &x, 1e-6);
        let h = fd_hessian(f, &x, 1e-4);
        let dir = match h.clone().lu().solve(&(-&g)) {
            Some(d) => d,
            None => break,
        };
        let mut improved = false;
        let mut t = 1.0;
        for _ in 0..25 {
            let cand = &x + &dir * t;
            let fc = f(&cand);
            if fc > fx {
                x = cand;
                fx = fc;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    x
}

/// Generic maximum-likelihood reference: Nelder-Mead plus Newton polish on
/// the oracle marginal log-likelihood, followed by the oracle BLUP.
pub fn ml_oracle_fit(data: &Dataset) -> (ModelParams, RandomEffects) {
    let p = data.p();
    let q = data.q();

    // test-local least-squares start
    let mut gram = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    let mut n = 0usize;
    for c in data.clusters() {
        gram += c.x().transpose() * c.x();
        rhs += c.x().transpose() * c.y();
        n += c.n();
    }
    let beta0 = gram.lu().solve(&rhs).expect("toy design has full rank");
    let mut rss = 0.0;
    for c in data.clusters() {
        rss += (c.y() - c.x() * &beta0).norm_squared();
    }
    let sigma2_0 = (rss / n as f64).max(1e-4);
    let start = unpack_theta(
        &{
            let mut v: Vec<f64> = beta0.iter().cloned().collect();
            v.push(sigma2_0.ln());
            for c in 0..q {
                v.push((0.5f64).ln() * 0.5);
                for _ in c + 1..q {
                    v.push(0.0);
                }
            }
            DVector::from_vec(v)
        },
        p,
        q,
    );

    let objective = |v: &DVector<f64>| -> f64 {
        let params = unpack_theta(v, p, q);
        marginal_loglik_oracle(data, &params)
    };
    let x0 = pack_theta(&start);
    let x1 = nelder_mead(&objective, &x0, 0.3, 4000, 1e-13);
    let x2 = nelder_mead(&objective, &x1, 0.05, 2000, 1e-14);
    let x3 = newton_polish(&objective, &x2, 12);
    let params = unpack_theta(&x3, p, q);
    let ranef = blup_oracle(data, &params);
    (params, ranef)
}

/// Inverse of `vech`: rebuilds the symmetric matrix (lower triangle stacked
/// by column).
pub fn unvech(v: &[f64], q: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(q, q);
    let mut idx = 0;
    for c in 0..q {
        for r in c..q {
            m[(r, c)] = v[idx];
            m[(c, r)] = v[idx];
            idx += 1;
        }
    }
    m
}

/// Maximum relative discrepancy between the analytic score blocks (rescaled
/// from `wee_residuals`) and central finite differences of the divergence.
///
/// Off-diagonal R entries are perturbed symmetrically, so the directional
/// derivative equals twice the unconstrained matrix gradient entry.
pub fn score_vs_fd(
    data: &Dataset,
    params: &ModelParams,
    ranef: &RandomEffects,
    gamma: f64,
    step: f64,
) -> f64 {
    use hgdlmm::{evaluate_hgd, wee_residuals, FitConfig, GammaConfig};

    let cfg = FitConfig::new(gamma);
    let gcfg = GammaConfig::new(gamma).unwrap();
    let p = data.p();
    let q = data.q();
    let m = data.m();
    let n = data.n_total() as f64;
    let wee = wee_residuals(data, params, ranef, &cfg).unwrap();

    let eval = |params: &ModelParams, ranef: &RandomEffects| -> f64 {
        evaluate_hgd(data, params, ranef, &gcfg).unwrap()
    };
    let rel = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(1e-2);
    let mut worst: f64 = 0.0;

    // beta block: gradient = wee * N / sigma2
    for k in 0..p {
        let mut bp = params.beta().clone();
        let mut bm = params.beta().clone();
        let h = step * (1.0 + bp[k].abs());
        bp[k] += h;
        bm[k] -= h;
        let pp = ModelParams::new(bp, params.sigma2(), params.r().clone()).unwrap();
        let pm = ModelParams::new(bm, params.sigma2(), params.r().clone()).unwrap();
        let fd = (eval(&pp, ranef) - eval(&pm, ranef)) / (2.0 * h);
        let analytic = wee[k] * n / params.sigma2();
        worst = worst.max(rel(analytic, fd));
    }

    // random-effect blocks: gradient = wee * n_i
    for (i, c) in data.clusters().iter().enumerate() {
        for k in 0..q {
            let h = step * (1.0 + ranef.cluster(i)[k].abs());
            let perturb = |delta: f64| {
                let mut all: Vec<DVector<f64>> = ranef.all().to_vec();
                all[i][k] += delta;
                RandomEffects::new(all).unwrap()
            };
            let fd = (eval(params, &perturb(h)) - eval(params, &perturb(-h))) / (2.0 * h);
            let analytic = wee[p + i * q + k] * c.n() as f64;
            worst = worst.max(rel(analytic, fd));
        }
    }

    // sigma2: gradient = wee * N
    {
        let h = step * (1.0 + params.sigma2());
        let pp = ModelParams::new(params.beta().clone(), params.sigma2() + h, params.r().clone())
            .unwrap();
        let pm = ModelParams::new(params.beta().clone(), params.sigma2() - h, params.r().clone())
            .unwrap();
        let fd = (eval(&pp, ranef) - eval(&pm, ranef)) / (2.0 * h);
        let analytic = wee[p + m * q] * n;
        worst = worst.max(rel(analytic, fd));
    }

    // R: matrix gradient = unvech(wee * m)
    {
        let grad = unvech(
            &wee.iter().skip(p + m * q + 1).map(|v| v * m as f64).collect::<Vec<_>>(),
            q,
        );
        for c in 0..q {
            for r in c..q {
                let h = step * (1.0 + params.r()[(r, c)].abs());
                let perturb = |delta: f64| {
                    let mut rm = params.r().clone();
                    rm[(r, c)] += delta;
                    if r != c {
                        rm[(c, r)] += delta;
                    }
                    ModelParams::new(params.beta().clone(), params.sigma2(), rm).unwrap()
                };
                let fd = (eval(&perturb(h), ranef) - eval(&perturb(-h), ranef)) / (2.0 * h);
                let analytic = if r == c { grad[(r, c)] } else { 2.0 * grad[(r, c)] };
                worst = worst.max(rel(analytic, fd));
            }
        }
    }
    worst
}

/// Max-norm distance across `(beta, sigma2, vech(R), b)`.
pub fn param_distance(
    a: &ModelParams,
    ba: &RandomEffects,
    b: &ModelParams,
    bb: &RandomEffects,
) -> f64 {
    let mut d: f64 = 0.0;
    for (x, y) in a.beta().iter().zip(b.beta().iter()) {
        d = d.max((x - y).abs());
    }
    d = d.max((a.sigma2() - b.sigma2()).abs());
    for (x, y) in hgdlmm::vech(a.r()).iter().zip(hgdlmm::vech(b.r())) {
        d = d.max((x - y).abs());
    }
    for (va, vb) in ba.all().iter().zip(bb.all()) {
        for (x, y) in va.iter().zip(vb.iter()) {
            d = d.max((x - y).abs());
        }
    }
    d
}
