//! Exact inference for linear-Gaussian SDEs observed at discrete times.
//!
//! Transitions between two times come from integrating the moment equations
//! `dPhi/dt = F Phi`, `dQ/dt = F Q + Q F' + L L'` with RK4. The filter, the
//! smoother and any brute-force check built from [`LinearSystemSpec::transition`]
//! therefore agree up to rounding.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{DecoderKind, LinearPrior, ModelConfig, LN_2PI};
use crate::series::TimeSeries;

pub type MatrixFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;

#[derive(Clone)]
pub struct LinearSystemSpec {
    /// `F(t)`, `D x D`.
    pub drift: MatrixFn,
    /// `L(t)`, `D x W`.
    pub dispersion: MatrixFn,
    /// `H`, `d_x x D`.
    pub obs_map: DMatrix<f64>,
    /// Observation noise covariance `R`, `d_x x d_x`.
    pub obs_cov: DMatrix<f64>,
    pub m0: DVector<f64>,
    pub p0: DMatrix<f64>,
    /// RK4 step for the moment equations.
    pub step: f64,
}

impl std::fmt::Debug for LinearSystemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinearSystemSpec")
            .field("dim", &self.dim())
            .field("obs_map", &self.obs_map)
            .field("obs_cov", &self.obs_cov)
            .field("m0", &self.m0)
            .field("p0", &self.p0)
            .finish_non_exhaustive()
    }
}

impl LinearSystemSpec {
    /// Scalar system `dz = f(t) z dt + l(t) dw`, `x = z + N(0, r)`, `z_0 ~ N(0, 1)`.
    pub fn scalar(f: impl Fn(f64) -> f64 + Send + Sync + 'static, l: impl Fn(f64) -> f64 + Send + Sync + 'static, r: f64) -> Self {
        Self {
            drift: Arc::new(move |t| DMatrix::from_element(1, 1, f(t))),
            dispersion: Arc::new(move |t| DMatrix::from_element(1, 1, l(t))),
            obs_map: DMatrix::identity(1, 1),
            obs_cov: DMatrix::from_element(1, 1, r),
            m0: DVector::zeros(1),
            p0: DMatrix::identity(1, 1),
            step: 1e-4,
        }
    }

    /// `F(t) = -t`, `L(t) = t`, `H = 1`, `R = r`.
    pub fn time_varying(r: f64) -> Self {
        Self::scalar(|t| -t, |t| t, r)
    }

    /// The exact model of a latent SDE with a fixed linear prior, `N(0, I)`
    /// initial state and identity decoder with fixed noise.
    pub fn from_model(cfg: &ModelConfig) -> Result<Self> {
        let lin = cfg
            .fixed_prior
            .clone()
            .ok_or_else(|| Error::Config("model has a learned prior".into()))?;
        let obs_std = match (cfg.decoder, cfg.obs_std, cfg.learn_initial) {
            (DecoderKind::Identity, Some(s), false) => s,
            _ => return Err(Error::Config("oracle needs an identity decoder, fixed noise and fixed p(z_0)".into())),
        };
        let d = cfg.latent_dim;
        let g_min = cfg.g_min;
        let disp = lin.dispersion.clone();
        let drift = lin.drift;
        Ok(Self {
            drift: Arc::new(move |t| DMatrix::identity(d, d) * LinearPrior::eval(&drift, t)),
            dispersion: Arc::new(move |t| {
                let b = LinearPrior::eval(&disp, t);
                DMatrix::identity(d, d) * (b * b + g_min * g_min).sqrt()
            }),
            obs_map: DMatrix::identity(d, d),
            obs_cov: DMatrix::identity(d, d) * (obs_std * obs_std),
            m0: DVector::zeros(d),
            p0: DMatrix::identity(d, d),
            step: 1e-4,
        })
    }

    pub fn dim(&self) -> usize {
        self.m0.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_map.nrows()
    }

    fn moment_rhs(&self, t: f64, phi: &DMatrix<f64>, q: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let f = (self.drift)(t);
        let l = (self.dispersion)(t);
        let dphi = &f * phi;
        let dq = &f * q + q * f.transpose() + &l * l.transpose();
        (dphi, dq)
    }

    /// `(Phi, Q)` such that `z_b | z_a ~ N(Phi z_a, Q)`.
    pub fn transition(&self, ta: f64, tb: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = self.dim();
        let mut phi = DMatrix::identity(d, d);
        let mut q = DMatrix::zeros(d, d);
        if tb <= ta {
            return (phi, q);
        }
        let n = ((tb - ta) / self.step).ceil().max(1.0) as usize;
        let h = (tb - ta) / n as f64;
        for i in 0..n {
            let t = ta + i as f64 * h;
            let (k1p, k1q) = self.moment_rhs(t, &phi, &q);
            let (k2p, k2q) = self.moment_rhs(t + 0.5 * h, &(&phi + &k1p * (0.5 * h)), &(&q + &k1q * (0.5 * h)));
            let (k3p, k3q) = self.moment_rhs(t + 0.5 * h, &(&phi + &k2p * (0.5 * h)), &(&q + &k2q * (0.5 * h)));
            let (k4p, k4q) = self.moment_rhs(t + h, &(&phi + &k3p * h), &(&q + &k3q * h));
            phi += (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (h / 6.0);
            q += (k1q + k2q * 2.0 + k3q * 2.0 + k4q) * (h / 6.0);
        }
        (phi, q)
    }

    /// Prior moments of `z_t` at each of `times` (sorted), starting from `t = 0`.
    pub fn prior_moments(&self, times: &[f64]) -> Vec<(DVector<f64>, DMatrix<f64>)> {
        let (mut m, mut p, mut prev) = (self.m0.clone(), self.p0.clone(), 0.0);
        times
            .iter()
            .map(|&t| {
                let (phi, q) = self.transition(prev, t);
                m = &phi * &m;
                p = &phi * &p * phi.transpose() + q;
                prev = t;
                (m.clone(), p.clone())
            })
            .collect()
    }
}

fn obs_vector(series: &TimeSeries, i: usize) -> DVector<f64> {
    DVector::from_column_slice(&series.values[i])
}

struct Node {
    t: f64,
    obs: Option<usize>,
}

fn merge_nodes(series: &TimeSeries, query: &[f64]) -> Vec<Node> {
    let mut nodes: Vec<Node> = series
        .times
        .iter()
        .enumerate()
        .map(|(i, &t)| Node { t, obs: Some(i) })
        .collect();
    for &t in query {
        if !series.times.contains(&t) {
            nodes.push(Node { t, obs: None });
        }
    }
    nodes.sort_by(|a, b| a.t.total_cmp(&b.t));
    nodes.dedup_by(|a, b| a.t == b.t && a.obs.is_none());
    nodes
}

struct FilterPass {
    phi: Vec<DMatrix<f64>>,
    pred: Vec<(DVector<f64>, DMatrix<f64>)>,
    filt: Vec<(DVector<f64>, DMatrix<f64>)>,
    loglik: f64,
}

fn filter(spec: &LinearSystemSpec, series: &TimeSeries, nodes: &[Node]) -> Result<FilterPass> {
    if series.is_empty() {
        return Err(Error::EmptySeries);
    }
    if series.dim() != spec.obs_dim() {
        return Err(Error::Dimension {
            what: "observation dimension",
            expected: spec.obs_dim(),
            got: series.dim(),
        });
    }
    let (mut m, mut p, mut prev) = (spec.m0.clone(), spec.p0.clone(), 0.0);
    let mut out = FilterPass {
        phi: Vec::with_capacity(nodes.len()),
        pred: Vec::with_capacity(nodes.len()),
        filt: Vec::with_capacity(nodes.len()),
        loglik: 0.0,
    };
    let h = &spec.obs_map;
    for node in nodes {
        let (phi, q) = spec.transition(prev, node.t);
        m = &phi * &m;
        p = &phi * &p * phi.transpose() + q;
        out.phi.push(phi);
        out.pred.push((m.clone(), p.clone()));
        if let Some(i) = node.obs {
            let v = obs_vector(series, i) - h * &m;
            let s = h * &p * h.transpose() + &spec.obs_cov;
            let chol = s.clone().cholesky().ok_or(Error::Innovation { t: node.t })?;
            let s_inv_v = chol.solve(&v);
            let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
            out.loglik -= 0.5 * (v.len() as f64 * LN_2PI + log_det + v.dot(&s_inv_v));
            let k = chol.solve(&(h * &p)).transpose();
            m += &k * v;
            p = &p - &k * h * &p;
            p = (&p + p.transpose()) * 0.5;
        }
        out.filt.push((m.clone(), p.clone()));
        prev = node.t;
    }
    Ok(out)
}

/// `log p(X)` by the Kalman filter.
pub fn kalman_loglik(spec: &LinearSystemSpec, series: &TimeSeries) -> Result<f64> {
    let nodes = merge_nodes(series, &[]);
    Ok(filter(spec, series, &nodes)?.loglik)
}

/// Kalman filter on a grid refined with observation-free points.
pub fn kalman_loglik_refined(spec: &LinearSystemSpec, series: &TimeSeries, extra: &[f64]) -> Result<f64> {
    let nodes = merge_nodes(series, extra);
    Ok(filter(spec, series, &nodes)?.loglik)
}

/// `p(z_t | X)` at each query time by a Rauch-Tung-Striebel pass; query times
/// enter the filter as prediction-only points.
pub fn kalman_smoother_marginals(
    spec: &LinearSystemSpec,
    series: &TimeSeries,
    query: &[f64],
) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
    let nodes = merge_nodes(series, query);
    let pass = filter(spec, series, &nodes)?;
    let n = nodes.len();
    let mut smooth = pass.filt.clone();
    for k in (0..n - 1).rev() {
        let (mf, pf) = &pass.filt[k];
        let (mp, pp) = &pass.pred[k + 1];
        let chol = pp.clone().cholesky().ok_or(Error::Innovation { t: nodes[k + 1].t })?;
        // G = Pf Phi' Pp^{-1}
        let g = chol.solve(&(&pass.phi[k + 1] * pf)).transpose();
        let (ms_next, ps_next) = smooth[k + 1].clone();
        let ms = mf + &g * (ms_next - mp);
        let ps = pf + &g * (ps_next - pp) * g.transpose();
        smooth[k] = (ms, (&ps + ps.transpose()) * 0.5);
    }
    Ok(query
        .iter()
        .map(|&t| {
            let k = nodes.iter().position(|nd| nd.t == t).expect("query node present");
            smooth[k].clone()
        })
        .collect())
}
