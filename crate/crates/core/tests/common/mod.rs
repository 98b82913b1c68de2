//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use sdematch::oracle::LinearSystemSpec;
use sdematch::TimeSeries;

/// Nodes and weights of the `n`-point Gauss rule for the Jacobi matrix with
/// zero diagonal and off-diagonal `beta(k)`, `k = 1..n-1`, scaled by `mass`.
fn golub_welsch(n: usize, beta: impl Fn(usize) -> f64, mass: f64) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::zeros(n, n);
    for k in 1..n {
        j[(k, k - 1)] = beta(k);
        j[(k - 1, k)] = beta(k);
    }
    let eig = j.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], mass * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Gauss-Hermite rule for expectations under `N(0, 1)`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    golub_welsch(n, |k| (k as f64).sqrt(), 1.0)
}

/// Gauss-Legendre rule for integrals over `[a, b]`.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = golub_welsch(n, |k| k as f64 / ((4 * k * k - 1) as f64).sqrt(), 2.0);
    let half = 0.5 * (b - a);
    (
        x.iter().map(|v| a + half * (v + 1.0)).collect(),
        w.iter().map(|v| v * half).collect(),
    )
}

/// A two-dimensional time-varying system with a scalar observation.
pub fn coupled_system() -> LinearSystemSpec {
    LinearSystemSpec {
        drift: Arc::new(|t| DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, -0.3, -0.2]) * (1.0 + t)),
        dispersion: Arc::new(|t| DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.2, 0.3 + 0.1 * t])),
        obs_map: DMatrix::from_row_slice(1, 2, &[1.0, 0.5]),
        obs_cov: DMatrix::from_element(1, 1, 0.04),
        m0: DVector::from_vec(vec![0.3, -0.1]),
        p0: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]),
        step: 1e-3,
    }
}

/// Joint Gaussian of the latent states at `times` (sorted, distinct).
fn latent_joint(spec: &LinearSystemSpec, times: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let d = spec.dim();
    let n = times.len();
    let moments = spec.prior_moments(times);
    let mut mean = DVector::zeros(n * d);
    let mut cov = DMatrix::zeros(n * d, n * d);
    for i in 0..n {
        mean.rows_mut(i * d, d).copy_from(&moments[i].0);
        // Cov(z_j, z_i) = Phi(t_i -> t_j) P_i for j >= i
        let mut block = moments[i].1.clone();
        for j in i..n {
            if j > i {
                let (phi, _) = spec.transition(times[j - 1], times[j]);
                block = phi * block;
            }
            cov.view_mut((j * d, i * d), (d, d)).copy_from(&block);
            cov.view_mut((i * d, j * d), (d, d)).copy_from(&block.transpose());
        }
    }
    (mean, cov)
}

fn union_times(series: &TimeSeries, query: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = series.times.iter().chain(query).copied().collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

/// Joint of `(z at union times, x at observation times)`.
fn joint_with_obs(spec: &LinearSystemSpec, series: &TimeSeries, times: &[f64]) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let (d, dx) = (spec.dim(), spec.obs_dim());
    let (mz, sz) = latent_joint(spec, times);
    let n_obs = series.len();
    let mut h = DMatrix::zeros(n_obs * dx, times.len() * d);
    let mut x = DVector::zeros(n_obs * dx);
    for (k, t) in series.times.iter().enumerate() {
        let i = times.iter().position(|s| s == t).unwrap();
        h.view_mut((k * dx, i * d), (dx, d)).copy_from(&spec.obs_map);
        for c in 0..dx {
            x[k * dx + c] = series.values[k][c];
        }
    }
    (mz, sz, h, x)
}

pub fn brute_force_loglik(spec: &LinearSystemSpec, series: &TimeSeries) -> f64 {
    let times = union_times(series, &[]);
    let (mz, sz, h, x) = joint_with_obs(spec, series, &times);
    let dx = spec.obs_dim();
    let mut s = &h * &sz * h.transpose();
    for k in 0..series.len() {
        let mut blk = s.view_mut((k * dx, k * dx), (dx, dx));
        blk += &spec.obs_cov;
    }
    let r = x - &h * mz;
    let chol = s.cholesky().unwrap();
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let quad = r.dot(&chol.solve(&r));
    -0.5 * (quad + logdet + r.len() as f64 * (2.0 * std::f64::consts::PI).ln())
}

pub fn brute_force_smoother(spec: &LinearSystemSpec, series: &TimeSeries, query: &[f64]) -> Vec<(DVector<f64>, DMatrix<f64>)> {
    let times = union_times(series, query);
    let (mz, sz, h, x) = joint_with_obs(spec, series, &times);
    let (d, dx) = (spec.dim(), spec.obs_dim());
    let mut s = &h * &sz * h.transpose();
    for k in 0..series.len() {
        let mut blk = s.view_mut((k * dx, k * dx), (dx, dx));
        blk += &spec.obs_cov;
    }
    let chol = s.cholesky().unwrap();
    let cross = &sz * h.transpose();
    let mean = &mz + &cross * chol.solve(&(x - &h * &mz));
    let cov = &sz - &cross * chol.solve(&cross.transpose());
    query
        .iter()
        .map(|t| {
            let i = times.iter().position(|s| s == t).unwrap();
            (mean.rows(i * d, d).into_owned(), cov.view((i * d, i * d), (d, d)).into_owned())
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

use autodiff::Array;
use sdematch::matching::{matching_terms, residual, MatchingDraw};
use sdematch::{rng, LatentSde, SeriesBatch};

/// Tensor-product Gauss-Hermite points for `N(0, I_d)`.
pub fn gauss_hermite_grid(n: usize, d: usize) -> (Array, Vec<f64>) {
    let (x, w) = gauss_hermite(n);
    let total = n.pow(d as u32);
    let mut pts = Array::zeros(total, d);
    let mut wts = vec![1.0; total];
    for i in 0..total {
        let mut rest = i;
        for k in 0..d {
            let j = rest % n;
            rest /= n;
            pts.set(i, k, x[j]);
            wts[i] *= w[j];
        }
    }
    (pts, wts)
}

/// `int_0^{t_N} E_eps |r|^2 / 2 dt` for a single series: Gauss-Legendre on
/// each stretch between observation times (where the context has kinks),
/// Gauss-Hermite in `eps`.
pub fn diff_quadrature(model: &LatentSde, batch: &SeriesBatch, nodes_t: usize, nodes_eps: usize) -> f64 {
    let d = model.config.latent_dim;
    let (eps, w_eps) = gauss_hermite_grid(nodes_eps, d);
    let mut knots = vec![0.0];
    knots.extend(batch.times.iter().copied().filter(|&t| t > 0.0));
    let mut total = 0.0;
    for seg in knots.windows(2) {
        let (ts, wt) = gauss_legendre(nodes_t, seg[0], seg[1]);
        for (t, w) in ts.iter().zip(&wt) {
            let r = residual(model, batch, *t, &eps).unwrap();
            let inner: f64 = (0..eps.rows())
                .map(|i| w_eps[i] * 0.5 * (0..d).map(|k| r.get(i, k).powi(2)).sum::<f64>())
                .sum();
            total += w * inner;
        }
    }
    total
}

/// `sum_i E_eps[-log p(x_i | z_i)]` for a single series.
pub fn rec_enumeration(model: &LatentSde, batch: &SeriesBatch, nodes_eps: usize) -> f64 {
    let d = model.config.latent_dim;
    let (eps, w_eps) = gauss_hermite_grid(nodes_eps, d);
    let mut total = 0.0;
    for (i, &t) in batch.times.iter().enumerate() {
        let z = model.sample_posterior(batch, t, &eps).unwrap();
        let x = Array::from_fn(eps.rows(), batch.dim(), |_, c| batch.obs[i].get(0, c));
        let nll = model.obs_loglik(&x, &z).unwrap().scale(-1.0);
        total += (0..eps.rows()).map(|r| w_eps[r] * nll.get(r, 0)).sum::<f64>();
    }
    total
}

/// `n` single-sample estimates of `(L_diff, L_rec)` for a single series.
pub fn single_sample_estimates(model: &LatentSde, batch: &SeriesBatch, n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng::seeded(seed);
    let (mut diff, mut rec) = (Vec::with_capacity(n), Vec::with_capacity(n));
    while diff.len() < n {
        let k = 4096.min(n - diff.len());
        let draw = MatchingDraw::sample(&mut r, batch, model.config.latent_dim, k);
        let terms = matching_terms(model, model.params(), batch, &draw).unwrap();
        diff.extend(terms.diff.data());
        rec.extend(terms.rec.data());
    }
    (diff, rec)
}

pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// A small frozen model with a state-dependent, randomly perturbed `g`.
pub fn frozen_model(seed: u64, latent_dim: usize, obs_dim: usize) -> LatentSde {
    let mut cfg = sdematch::ModelConfig::new(latent_dim, obs_dim);
    cfg.width = 16;
    cfg.g_width = 8;
    cfg.context_dim = 8;
    cfg.seed = seed;
    let mut m = LatentSde::new(cfg).unwrap();
    let mut r = rng::seeded(seed ^ 0x9e37);
    for i in 0..m.store.len() {
        let id = autodiff::nn::ParamId(i);
        if m.store.name(id).starts_with("prior.g") {
            let v = m.store.get(id).clone();
            let noise = rng::normal_array(&mut r, v.rows(), v.cols()).scale(0.5);
            m.store.set(id, v.add(&noise).unwrap());
        }
    }
    m
}

pub fn four_point_series(obs_dim: usize) -> TimeSeries {
    let times = vec![0.1, 0.4, 0.7, 1.0];
    let values = (0..4)
        .map(|i| (0..obs_dim).map(|c| (i as f64 * 0.3 - 0.4) * (c as f64 + 1.0) * if c % 2 == 0 { 1.0 } else { -0.5 }).collect())
        .collect();
    TimeSeries::new(times, values).unwrap()
}
