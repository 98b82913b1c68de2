//! The simulation-free objective: closed-form KL at `t = 0`, a single-time
//! diffusion term and a single-index reconstruction term.

use autodiff::{time_jvp, Array, Dual, Tensor};
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{sde_drift, LatentSde};
use crate::rng;
use crate::series::SeriesBatch;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_prior: f64,
    pub l_diff: f64,
    pub l_rec: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_prior: f64, l_diff: f64, l_rec: f64) -> Self {
        Self {
            l_prior,
            l_diff,
            l_rec,
            total: l_prior + l_diff + l_rec,
        }
    }

    /// Name of the first non-finite term.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("prior", self.l_prior),
            ("diffusion", self.l_diff),
            ("reconstruction", self.l_rec),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Per-row loss terms on any tensor type. `prior` has one row per series,
/// `diff` and `rec` one row per sample.
#[derive(Debug, Clone)]
pub struct LossTerms<T> {
    pub prior: T,
    pub diff: T,
    pub rec: T,
}

impl<T: Tensor> LossTerms<T> {
    /// `mean(prior) + mean(diff) + mean(rec)`: the batch-averaged bound.
    pub fn total(&self) -> Result<T> {
        Ok(self.prior.mean().add(&self.diff.mean())?.add(&self.rec.mean())?)
    }

    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown::new(
            self.prior.mean().item(),
            self.diff.mean().item(),
            self.rec.mean().item(),
        )
    }
}

/// The random inputs of one objective evaluation, `rows = k * B`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingDraw {
    pub t: Vec<f64>,
    pub eps_diff: Array,
    pub idx: Vec<usize>,
    pub eps_rec: Array,
}

impl MatchingDraw {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, batch: &SeriesBatch, latent_dim: usize, per_series: usize) -> Self {
        let rows = batch.rows() * per_series;
        let t_end = batch.last_time();
        let t = (0..rows).map(|_| rng.random::<f64>() * t_end).collect();
        let eps_diff = rng::normal_array(rng, rows, latent_dim);
        let idx = (0..rows).map(|_| rng.random_range(0..batch.len())).collect();
        let eps_rec = rng::normal_array(rng, rows, latent_dim);
        Self {
            t,
            eps_diff,
            idx,
            eps_rec,
        }
    }
}

/// KL between `q(z_0 | X)` and `p(z_0)`, one row per series.
pub fn prior_terms<T: Tensor>(model: &LatentSde, p: &[T], batch: &SeriesBatch) -> Result<T> {
    let reparam = model.reparam()?;
    let ctx = reparam.encoder.encode(p, batch)?;
    let b = batch.rows();
    let c0 = ctx.at(&vec![0.0; b])?;
    let (mu0, s0) = reparam.heads(p, &c0, &p[0].constant(Array::zeros(b, 1)))?;
    model.kl_initial(p, &mu0, &s0)
}

pub fn matching_terms<T: Tensor>(
    model: &LatentSde,
    p: &[T],
    batch: &SeriesBatch,
    draw: &MatchingDraw,
) -> Result<LossTerms<T>> {
    let reparam = model.reparam()?;
    let t_end = batch.last_time();
    model.check_time(t_end)?;
    let like = &p[0];
    let ctx = reparam.encoder.encode(p, batch)?;

    let b = batch.rows();
    let c0 = ctx.at(&vec![0.0; b])?;
    let (mu0, s0) = reparam.heads(p, &c0, &like.constant(Array::zeros(b, 1)))?;
    let prior = model.kl_initial(p, &mu0, &s0)?;

    let c = ctx.at_dual(&draw.t)?;
    let t = like.constant(Array::column(&draw.t));
    let r = model.residual(p, &c, &t, &like.constant(draw.eps_diff.clone()))?;
    let diff = r.square().row_sum().scale(0.5 * t_end);

    let t_rec: Vec<f64> = draw.idx.iter().map(|&i| batch.times[i]).collect();
    let c = ctx.at(&t_rec)?;
    let (mu, sigma) = reparam.heads(p, &c, &like.constant(Array::column(&t_rec)))?;
    let z = mu.add(&sigma.mul(&like.constant(draw.eps_rec.clone()))?)?;
    let x = like.constant(batch.gather(&draw.idx));
    let rec = model.obs.nll(p, &x, &z)?.scale(batch.len() as f64);

    Ok(LossTerms { prior, diff, rec })
}

/// `KL(q(z_0 | X) || p(z_0))`, averaged over the series in the batch.
pub fn kl_initial(model: &LatentSde, batch: &SeriesBatch) -> Result<f64> {
    Ok(prior_terms(model, model.params(), batch)?.mean())
}

/// `r = (h - f) / g` at time `t` for rows `eps`.
pub fn residual(model: &LatentSde, batch: &SeriesBatch, t: f64, eps: &Array) -> Result<Array> {
    model.check_time(t)?;
    let p = model.params();
    let c = model.encoder().encode(p, batch)?.at_dual(&vec![t; eps.rows()])?;
    model.residual(p, &c, &Array::full(eps.rows(), 1, t), eps)
}

/// One draw of `T * |r|^2 / 2` with `t ~ U[0, T]`, `eps ~ N(0, I)`.
pub fn diff_loss_sample<R: Rng + ?Sized>(model: &LatentSde, batch: &SeriesBatch, rng: &mut R) -> Result<f64> {
    let draw = MatchingDraw::sample(rng, batch, model.config.latent_dim, 1);
    Ok(matching_terms(model, model.params(), batch, &draw)?.diff.mean())
}

/// One draw of `N * (-log p(x_i | z_i))` with `i` uniform.
pub fn rec_loss_sample<R: Rng + ?Sized>(model: &LatentSde, batch: &SeriesBatch, rng: &mut R) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptySeries);
    }
    let draw = MatchingDraw::sample(rng, batch, model.config.latent_dim, 1);
    Ok(matching_terms(model, model.params(), batch, &draw)?.rec.mean())
}

/// Mean and standard error of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            se: (var / n as f64).sqrt(),
            n,
        }
    }
}

/// Rows per evaluation chunk for Monte Carlo estimates.
pub const CHUNK_ROWS: usize = 2048;

/// Monte Carlo NELBO of the matching objective. Each sample is one
/// `(t, eps)` / `(i, eps)` draw per series; the returned estimate is over
/// batch-averaged samples.
pub fn estimate_nelbo<R: Rng + ?Sized>(
    model: &LatentSde,
    batch: &SeriesBatch,
    samples: usize,
    rng: &mut R,
) -> Result<Estimate> {
    let p = model.params();
    let b = batch.rows();
    let prior = prior_terms(model, p, batch)?.mean();
    let per_chunk = (CHUNK_ROWS / b).max(1);
    let mut values = Vec::with_capacity(samples);
    let mut done = 0;
    while done < samples {
        let k = per_chunk.min(samples - done);
        let draw = MatchingDraw::sample(rng, batch, model.config.latent_dim, k);
        let terms = matching_terms(model, p, batch, &draw)?;
        for s in 0..k {
            let mut v = 0.0;
            for j in 0..b {
                let r = s * b + j;
                v += terms.diff.get(r, 0) + terms.rec.get(r, 0);
            }
            values.push(prior + v / b as f64);
        }
        done += k;
    }
    Ok(Estimate::from_samples(&values))
}

/// Variance-preserving schedule in the time direction of the latent SDE view
/// of diffusion models: noise at `t = 0`, data at `t = 1`.
/// `alpha = exp(-b (1 - t)^2 / 2)`, `sigma = sqrt(1 - alpha^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VpSchedule {
    pub b: f64,
}

impl VpSchedule {
    pub fn alpha<T: Tensor>(&self, t: &T) -> T {
        t.neg().add_scalar(1.0).square().scale(-0.5 * self.b).exp()
    }

    pub fn sigma<T: Tensor>(&self, t: &T) -> T {
        self.alpha(t).square().neg().add_scalar(1.0).sqrt()
    }

    /// `f(t) = alpha' / alpha = b (1 - t)`.
    pub fn f(&self, t: f64) -> f64 {
        self.b * (1.0 - t)
    }

    /// `g^2 = 2 sigma^2 (alpha'/alpha - sigma'/sigma)`, the diffusion for which
    /// `dz = (f z + g^2 score) dt + g dw` keeps `N(alpha x, sigma^2)` marginals.
    pub fn g2(&self, t: f64) -> f64 {
        let a = (-0.5 * self.b * (1.0 - t).powi(2)).exp();
        let a_dot = self.b * (1.0 - t) * a;
        let s2 = 1.0 - a * a;
        let s_dot_over_s = -a * a_dot / s2;
        2.0 * s2 * (a_dot / a - s_dot_over_s)
    }
}

/// Reweighted denoising score matching integrand `g^2/2 |s - score|^2`.
pub fn dsm_integrand(g2: f64, s: &Array, score: &Array) -> Result<f64> {
    Ok(0.5 * g2 * s.sub(score)?.sum_squares())
}

/// Evaluates the matching integrand `|r|^2/2` and the reweighted denoising
/// score matching integrand at the same `(x, t, eps)`, with the posterior
/// `N(alpha_t x, sigma_t^2)` and the prior drift `f(t) z + g^2 s(z, t)`.
///
/// The matching side uses the generic machinery: forward mode for the flow
/// velocity and [`sde_drift`] for the posterior drift.
pub fn dsm_correspondence_check(
    schedule: &VpSchedule,
    score_net: &dyn Fn(&Array, f64) -> Result<Array>,
    x: &Array,
    t: f64,
    eps: &Array,
) -> Result<(f64, f64)> {
    let flow = time_jvp(&Array::scalar(t), |td: &Dual<Array>| {
        let a = schedule.alpha(td);
        let s = schedule.sigma(td);
        let mu = Dual::constant_of(x.clone()).mul(&a)?;
        Dual::concat_cols(&[mu, s])
    })?;
    let d = x.cols();
    let (primal, tangent) = flow.into_parts();
    let (mu, sigma) = (primal.slice_cols(0, d)?, primal.slice_cols(d, 1)?);
    let (mu_dot, sigma_dot) = (tangent.slice_cols(0, d)?, tangent.slice_cols(d, 1)?);

    let z = mu.add(&sigma.mul(eps)?)?;
    let fbar = mu_dot.add(&sigma_dot.mul(eps)?)?;
    let score = eps.div(&sigma)?.scale(-1.0);
    let g2 = schedule.g2(t);
    let g = Array::full(1, d, g2.sqrt());
    let f = sde_drift(&fbar, &score, &g, None)?;

    let s = score_net(&z, t)?;
    let h = z.scale(schedule.f(t)).add(&s.scale(g2))?;
    let r = h.sub(&f)?.div(&g)?;
    let lhs = 0.5 * r.sum_squares();
    let rhs = dsm_integrand(g2, &s, &score)?;
    Ok((lhs, rhs))
}
