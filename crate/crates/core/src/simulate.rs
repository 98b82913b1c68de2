//! Euler-Maruyama integration of the prior and posterior processes.
//!
//! Every path owns a random stream keyed by its index, and paths are advanced
//! in fixed blocks, so path `p` is the same whatever the number of paths or
//! threads.

use std::fmt::Write as _;
use std::ops::Range;

use autodiff::{Array, Tensor};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{sde_drift, LatentSde};
use crate::rng;
use crate::series::{SeriesBatch, TimeSeries};

const BLOCK: usize = 512;
const TAG_INIT: u64 = 0x1417;
const TAG_NOISE: u64 = 0x4015e;
const TAG_OBS: u64 = 0x0b5;

/// States of `P` paths at each recorded time, one `P x D` array per time.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub times: Vec<f64>,
    pub states: Vec<Array>,
    pub seed: u64,
}

impl TrajectoryBatch {
    pub fn paths(&self) -> usize {
        self.states.first().map_or(0, Array::rows)
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Array::cols)
    }

    /// Sample mean over paths at recorded time index `m`.
    pub fn mean(&self, m: usize) -> Vec<f64> {
        let s = &self.states[m];
        let n = s.rows() as f64;
        (0..s.cols()).map(|j| (0..s.rows()).map(|i| s.get(i, j)).sum::<f64>() / n).collect()
    }

    /// Sample covariance (divisor `P - 1`) at recorded time index `m`.
    pub fn covariance(&self, m: usize) -> Vec<Vec<f64>> {
        let s = &self.states[m];
        let mean = self.mean(m);
        let d = s.cols();
        let n = s.rows() as f64;
        let mut cov = vec![vec![0.0; d]; d];
        for i in 0..s.rows() {
            for a in 0..d {
                for b in 0..d {
                    cov[a][b] += (s.get(i, a) - mean[a]) * (s.get(i, b) - mean[b]);
                }
            }
        }
        for row in &mut cov {
            for v in row.iter_mut() {
                *v /= n - 1.0;
            }
        }
        cov
    }

    /// CSV with columns `path,t,z_1..z_D[,x_1..x_dx]`, path-major.
    pub fn to_csv(&self, obs: Option<&[Array]>) -> String {
        let d = self.dim();
        let dx = obs.and_then(|o| o.first()).map_or(0, Array::cols);
        let mut out = String::from("path,t");
        for j in 0..d {
            let _ = write!(out, ",z_{}", j + 1);
        }
        for j in 0..dx {
            let _ = write!(out, ",x_{}", j + 1);
        }
        out.push('\n');
        for p in 0..self.paths() {
            for (m, t) in self.times.iter().enumerate() {
                let _ = write!(out, "{p},{t}");
                for j in 0..d {
                    let _ = write!(out, ",{}", self.states[m].get(p, j));
                }
                if let Some(o) = obs {
                    for j in 0..dx {
                        let _ = write!(out, ",{}", o[m].get(p, j));
                    }
                }
                out.push('\n');
            }
        }
        out
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("time grid must be non-empty and strictly increasing".into()));
    }
    Ok(())
}

fn path_streams(seed: u64, rows: Range<usize>) -> Vec<ChaCha8Rng> {
    rows.map(|p| rng::stream(seed, p as u64)).collect()
}

/// Rows `rows` of `x`.
fn rows_of(x: &Array, rows: Range<usize>) -> Result<Array> {
    Ok(x.slice_rows(rows.start, rows.len())?)
}

/// Integrates a block of paths. `coeffs` returns drift and diffusion for
/// the state block, the time and the global row range of the block;
/// `keep[n]` marks grid points to record.
fn integrate_block<C>(coeffs: &C, z0: Array, grid: &[f64], keep: &[bool], seed: u64, rows: Range<usize>) -> Result<Vec<Array>>
where
    C: Fn(&Array, f64, Range<usize>) -> Result<(Array, Array)>,
{
    let d = z0.cols();
    let mut streams = path_streams(seed, rows.clone());
    let mut z = z0;
    let mut out = Vec::with_capacity(keep.iter().filter(|&&k| k).count());
    if keep[0] {
        out.push(z.clone());
    }
    for n in 0..grid.len() - 1 {
        let (t, dt) = (grid[n], grid[n + 1] - grid[n]);
        let (f, g) = coeffs(&z, t, rows.clone())?;
        let xi = rng::normal_rows(&mut streams, d);
        let kick = g.mul(&xi)?.scale(dt.sqrt());
        z = z.add(&f.scale(dt))?.add(&kick)?;
        if !z.is_finite() {
            return Err(Error::NonFiniteState { step: n + 1, t: grid[n + 1] });
        }
        if keep[n + 1] {
            out.push(z.clone());
        }
    }
    Ok(out)
}

fn integrate<C>(coeffs: C, z0: &Array, grid: &[f64], keep: &[bool], seed: u64) -> Result<TrajectoryBatch>
where
    C: Fn(&Array, f64, Range<usize>) -> Result<(Array, Array)> + Sync,
{
    check_grid(grid)?;
    let p = z0.rows();
    let blocks: Vec<Range<usize>> = (0..p.div_ceil(BLOCK))
        .map(|b| b * BLOCK..((b + 1) * BLOCK).min(p))
        .collect();
    let parts = blocks
        .par_iter()
        .map(|rows| integrate_block(&coeffs, rows_of(z0, rows.clone())?, grid, keep, seed, rows.clone()))
        .collect::<Result<Vec<Vec<Array>>>>()?;
    let kept = keep.iter().filter(|&&k| k).count();
    let states = (0..kept)
        .map(|m| {
            let pieces: Vec<&Array> = parts.iter().map(|part| &part[m]).collect();
            Ok(Array::concat_rows(&pieces)?)
        })
        .collect::<Result<Vec<Array>>>()?;
    let times = grid.iter().zip(keep).filter(|(_, &k)| k).map(|(&t, _)| t).collect();
    Ok(TrajectoryBatch { times, states, seed })
}

/// `z_{n+1} = z_n + f dt + g sqrt(dt) xi` with diagonal `g`, recording every
/// grid point. Path `p` draws its noise from stream `p` of `seed`.
pub fn euler_maruyama<F, G>(drift: F, diffusion: G, z0: &Array, grid: &[f64], seed: u64) -> Result<TrajectoryBatch>
where
    F: Fn(&Array, f64) -> Result<Array> + Sync,
    G: Fn(&Array, f64) -> Result<Array> + Sync,
{
    let keep = vec![true; grid.len()];
    integrate(|z, t, _| Ok((drift(z, t)?, diffusion(z, t)?)), z0, grid, &keep, seed)
}

/// As [`euler_maruyama`] but records only the grid points in `record`,
/// which must all lie on the grid.
pub fn euler_maruyama_at<F, G>(
    drift: F,
    diffusion: G,
    z0: &Array,
    grid: &[f64],
    record: &[f64],
    seed: u64,
) -> Result<TrajectoryBatch>
where
    F: Fn(&Array, f64) -> Result<Array> + Sync,
    G: Fn(&Array, f64) -> Result<Array> + Sync,
{
    let keep = record_mask(grid, record)?;
    integrate(|z, t, _| Ok((drift(z, t)?, diffusion(z, t)?)), z0, grid, &keep, seed)
}

/// Euler-Maruyama driven by given Brownian increments, `dw[n]: P x D` over
/// `[grid[n], grid[n + 1]]`. Lets coarse and fine grids share one path.
pub fn euler_maruyama_with_increments<F, G>(drift: F, diffusion: G, z0: &Array, grid: &[f64], dw: &[Array]) -> Result<TrajectoryBatch>
where
    F: Fn(&Array, f64) -> Result<Array>,
    G: Fn(&Array, f64) -> Result<Array>,
{
    check_grid(grid)?;
    if dw.len() + 1 != grid.len() {
        return Err(Error::Dimension {
            what: "Brownian increments",
            expected: grid.len() - 1,
            got: dw.len(),
        });
    }
    let mut states = Vec::with_capacity(grid.len());
    states.push(z0.clone());
    for n in 0..dw.len() {
        let z = &states[n];
        let (t, dt) = (grid[n], grid[n + 1] - grid[n]);
        let next = z.add(&drift(z, t)?.scale(dt))?.add(&diffusion(z, t)?.mul(&dw[n])?)?;
        if !next.is_finite() {
            return Err(Error::NonFiniteState { step: n + 1, t: grid[n + 1] });
        }
        states.push(next);
    }
    Ok(TrajectoryBatch {
        times: grid.to_vec(),
        states,
        seed: 0,
    })
}

fn record_mask(grid: &[f64], record: &[f64]) -> Result<Vec<bool>> {
    let mut keep = vec![false; grid.len()];
    for &t in record {
        let i = grid
            .iter()
            .position(|&g| (g - t).abs() <= 1e-12 * t.abs().max(1.0))
            .ok_or_else(|| Error::Config(format!("record time {t} is not on the grid")))?;
        keep[i] = true;
    }
    Ok(keep)
}

/// `n` uniform steps from `a` to `b`, endpoints exact.
pub fn uniform_grid(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| if i == n { b } else { a + (b - a) * i as f64 / n as f64 }).collect()
}

fn standard_normals(seed: u64, paths: usize, d: usize) -> Array {
    let mut streams = path_streams(seed, 0..paths);
    rng::normal_rows(&mut streams, d)
}

/// Unconditional samples: `z_0 ~ p(z_0)`, the prior SDE on `grid`, and
/// observations `x ~ p(x | z)` at every grid point.
pub fn sample_prior(model: &LatentSde, grid: &[f64], paths: usize, seed: u64) -> Result<(TrajectoryBatch, Vec<Array>)> {
    let p = model.params();
    let d = model.config.latent_dim;
    let eps = standard_normals(rng::derive(seed, TAG_INIT), paths, d);
    let mean = model.initial.mean(p);
    let std = model.initial.std(p);
    let z0 = eps.mul(&std)?.add(&mean)?;
    let traj = euler_maruyama(
        |z, t| model.prior_drift(z, t),
        |z, t| model.prior_diffusion(z, t),
        &z0,
        grid,
        rng::derive(seed, TAG_NOISE),
    )?;
    let obs_std = model.obs.std(p);
    let obs = traj
        .states
        .iter()
        .enumerate()
        .map(|(m, z)| {
            let mean = model.obs.decode(p, z)?;
            let noise = standard_normals(rng::derive(rng::derive(seed, TAG_OBS), m as u64), paths, mean.cols());
            Ok(mean.add(&noise.mul(&obs_std)?)?)
        })
        .collect::<Result<Vec<Array>>>()?;
    Ok((traj, obs))
}

/// Draws `z_{t_N} = F(eps, t_N, X)` for each path (path `p` follows series
/// `p % B`) and integrates the prior SDE over `grid`. The grid must start at
/// or after `t_N`; when it starts later, the interval from `t_N` is
/// integrated but not recorded.
pub fn forecast(model: &LatentSde, batch: &SeriesBatch, grid: &[f64], paths: usize, seed: u64) -> Result<TrajectoryBatch> {
    check_grid(grid)?;
    let t_n = batch.last_time();
    if grid[0] < t_n {
        return Err(Error::Horizon { start: grid[0], last: t_n });
    }
    check_paths(batch, paths)?;
    let d = model.config.latent_dim;
    let eps = standard_normals(rng::derive(seed, TAG_INIT), paths, d);
    let z0 = model.sample_posterior(batch, t_n, &eps)?;
    let mut full = grid.to_vec();
    let mut keep = vec![true; grid.len()];
    if grid[0] > t_n {
        full.insert(0, t_n);
        keep.insert(0, false);
    }
    integrate(
        |z, t, _| Ok((model.prior_drift(z, t)?, model.prior_diffusion(z, t)?)),
        &z0,
        &full,
        &keep,
        rng::derive(seed, TAG_NOISE),
    )
}

fn check_paths(batch: &SeriesBatch, paths: usize) -> Result<()> {
    if paths == 0 || paths % batch.rows() != 0 {
        return Err(Error::Dimension {
            what: "paths (multiple of series count)",
            expected: batch.rows(),
            got: paths,
        });
    }
    Ok(())
}

/// Rows of the per-series `x` (B rows) for global rows `rows`.
fn spread(x: &Array, rows: Range<usize>) -> Array {
    let b = x.rows();
    Array::from_fn(rows.len(), x.cols(), |i, j| x.get((rows.start + i) % b, j))
}

/// Integrates the posterior SDE `dz = f dt + g dw` with
/// `f = fbar + g^2 score / 2 + g dg/dz`, starting from `z_0 = F(eps, 0, X)`.
/// Used to check that its marginals are those of `F`; training never calls it.
pub fn simulate_posterior_sde(
    model: &LatentSde,
    batch: &SeriesBatch,
    grid: &[f64],
    record: &[f64],
    paths: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    check_grid(grid)?;
    check_paths(batch, paths)?;
    model.check_time(*grid.last().expect("checked"))?;
    let keep = record_mask(grid, record)?;
    let p = model.params();
    let d = model.config.latent_dim;
    let b = batch.rows();
    let ctx = model.encoder().encode(p, batch)?;
    let reparam = model.reparam()?;
    let marginals = grid
        .iter()
        .map(|&t| {
            let c = ctx.at_dual(&vec![t; b])?;
            reparam.marginal(p, &c, &Array::full(b, 1, t))
        })
        .collect::<Result<Vec<_>>>()?;
    let step_of = |t: f64| grid.partition_point(|&g| g < t);

    let eps0 = standard_normals(rng::derive(seed, TAG_INIT), paths, d);
    let m0 = &marginals[0];
    let z0 = eps0.mul(&spread(&m0.sigma, 0..paths))?.add(&spread(&m0.mu, 0..paths))?;
    let coeffs = |z: &Array, t: f64, rows: Range<usize>| -> Result<(Array, Array)> {
        let m = &marginals[step_of(t)];
        let (mu, sigma) = (spread(&m.mu, rows.clone()), spread(&m.sigma, rows.clone()));
        let eps = z.sub(&mu)?.div(&sigma)?;
        let fbar = spread(&m.mu_dot, rows.clone()).add(&spread(&m.sigma_dot, rows).mul(&eps)?)?;
        let score = eps.div(&sigma)?.neg();
        let tc = Array::full(z.rows(), 1, t);
        let (g, slope) = model.prior.diffusion_with_slope(p, z, &tc)?;
        let f = sde_drift(&fbar, &score, &g, slope.as_ref())?;
        Ok((f, g))
    };
    integrate(coeffs, &z0, grid, &keep, rng::derive(seed, TAG_NOISE))
}

/// Forecast error on held-out observations.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ForecastScore {
    /// Mean squared error of the decoded forecast mean.
    pub model_mse: f64,
    /// Mean squared error of repeating the last conditioning observation.
    pub last_value_mse: f64,
}

/// Conditions on the first `context` observations of each series (which must
/// share times), forecasts the remaining times with `per_series` paths per
/// series on a grid no coarser than `max_dt`, and scores the mean of the
/// decoded paths.
pub fn forecast_mse(
    model: &LatentSde,
    series: &[TimeSeries],
    context: usize,
    per_series: usize,
    max_dt: f64,
    seed: u64,
) -> Result<ForecastScore> {
    let first = series.first().ok_or(Error::EmptySeries)?;
    if context == 0 || context >= first.len() {
        return Err(Error::Config(format!(
            "forecast context must be in 1..{}, got {context}",
            first.len()
        )));
    }
    let prefixes: Vec<TimeSeries> = series.iter().map(|s| s.prefix(context)).collect();
    let batch = SeriesBatch::new(&prefixes.iter().collect::<Vec<_>>())?;
    let targets = &first.times[context..];
    let t_n = batch.last_time();
    let mut grid = vec![t_n];
    for &t in targets {
        let a = *grid.last().expect("non-empty");
        let n = ((t - a) / max_dt).ceil().max(1.0) as usize;
        grid.extend((1..=n).map(|k| if k == n { t } else { a + (t - a) * k as f64 / n as f64 }));
    }
    let b = batch.rows();
    let traj = forecast(model, &batch, &grid, b * per_series, seed)?;
    let p = model.params();
    let (mut se_model, mut se_last, mut count) = (0.0, 0.0, 0.0);
    for (k, &t) in targets.iter().enumerate() {
        let m = grid.iter().position(|&g| g == t).expect("target on grid");
        let x = model.obs.decode(p, &traj.states[m])?;
        for (j, s) in series.iter().enumerate() {
            let truth = &s.values[context + k];
            let last = &s.values[context - 1];
            for c in 0..x.cols() {
                let mean = (0..per_series).map(|r| x.get(r * b + j, c)).sum::<f64>() / per_series as f64;
                se_model += (mean - truth[c]).powi(2);
                se_last += (last[c] - truth[c]).powi(2);
                count += 1.0;
            }
        }
    }
    Ok(ForecastScore {
        model_mse: se_model / count,
        last_value_mse: se_last / count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ou(x: &Array, _: f64) -> Result<Array> {
        Ok(x.scale(-1.0))
    }

    fn unit(x: &Array, _: f64) -> Result<Array> {
        Ok(Array::full(x.rows(), x.cols(), 1.0))
    }

    #[test]
    fn zero_coefficients_keep_paths_constant() {
        let z0 = Array::from_fn(7, 2, |i, j| i as f64 - j as f64);
        let zero = |x: &Array, _: f64| Ok(Array::zeros(x.rows(), x.cols()));
        let traj = euler_maruyama(zero, zero, &z0, &uniform_grid(0.0, 1.0, 10), 3).unwrap();
        assert!(traj.states.iter().all(|s| *s == z0));
    }

    #[test]
    fn path_streams_do_not_depend_on_path_count() {
        let grid = uniform_grid(0.0, 0.5, 20);
        let a = euler_maruyama(ou, unit, &Array::zeros(3, 1), &grid, 11).unwrap();
        let b = euler_maruyama(ou, unit, &Array::zeros(BLOCK + 5, 1), &grid, 11).unwrap();
        for (sa, sb) in a.states.iter().zip(&b.states) {
            assert_eq!(sa, &sb.slice_rows(0, 3).unwrap());
        }
    }

    #[test]
    fn non_finite_state_reports_step() {
        let blow = |x: &Array, t: f64| Ok(if t > 0.25 { x.scale(f64::INFINITY) } else { x.clone() });
        let err = euler_maruyama(blow, unit, &Array::full(2, 1, 1.0), &uniform_grid(0.0, 1.0, 8), 0).unwrap_err();
        assert!(matches!(err, Error::NonFiniteState { step: 4, .. }), "{err:?}");
    }

    #[test]
    fn recording_subset_matches_full_run() {
        let grid = uniform_grid(0.0, 1.0, 40);
        let full = euler_maruyama(ou, unit, &Array::zeros(5, 1), &grid, 2).unwrap();
        let some = euler_maruyama_at(ou, unit, &Array::zeros(5, 1), &grid, &[0.25, 1.0], 2).unwrap();
        assert_eq!(some.times, vec![0.25, 1.0]);
        assert_eq!(some.states[0], full.states[10]);
        assert_eq!(some.states[1], full.states[40]);
        assert!(euler_maruyama_at(ou, unit, &Array::zeros(1, 1), &grid, &[0.31], 2).is_err());
    }

    #[test]
    fn csv_layout() {
        let grid = [0.0, 0.5];
        let traj = euler_maruyama(ou, unit, &Array::zeros(2, 1), &grid, 0).unwrap();
        let csv = traj.to_csv(Some(&[Array::zeros(2, 2), Array::ones(2, 2)]));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "path,t,z_1,x_1,x_2");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("0,0,0,0,0"));
        assert!(lines[4].starts_with("1,0.5,"));
    }
}
