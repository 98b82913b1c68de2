//! Simulation-based training: Euler-Maruyama on the posterior SDE with a
//! learned drift, accumulating the bound along the path and differentiating
//! through every solver step.

use autodiff::{Array, Tensor};
use rand::Rng;

use crate::error::{Error, Result};
use crate::matching::LossTerms;
use crate::model::{tile, LatentSde};
use crate::rng;
use crate::series::SeriesBatch;

/// Union of `steps` uniform intervals on `[0, t_end]` and the observation
/// times. Uniform points closer than `1e-9 * t_end` to an observation are
/// replaced by it.
pub fn union_grid(times: &[f64], steps: usize) -> Vec<f64> {
    let t_end = *times.last().expect("non-empty times");
    let tol = 1e-9 * t_end.max(1.0);
    let mut grid: Vec<f64> = times.to_vec();
    let steps = steps.max(1);
    for n in 0..=steps {
        let u = t_end * n as f64 / steps as f64;
        if times.iter().all(|&t| (t - u).abs() > tol) {
            grid.push(u);
        }
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

/// Noise for one path evaluation: initial `eps` and one normal draw per
/// solver step, `rows = k * B`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathDraw {
    pub eps0: Array,
    pub noise: Vec<Array>,
}

impl PathDraw {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, rows: usize, latent_dim: usize, grid_len: usize) -> Self {
        let eps0 = rng::normal_array(rng, rows, latent_dim);
        let noise = (1..grid_len).map(|_| rng::normal_array(rng, rows, latent_dim)).collect();
        Self { eps0, noise }
    }
}

/// The bound along one discretised posterior path per row.
///
/// `diff` is the left-point rectangle sum of `|r|^2/2 dt`, `rec` the sum of
/// `-log p(x_i | z_{t_i})` over observations, `prior` the closed-form KL at
/// `t = 0`. On each interval the context is the one seen at its right end.
pub fn elbo_path<T: Tensor>(
    model: &LatentSde,
    p: &[T],
    batch: &SeriesBatch,
    grid: &[f64],
    draw: &PathDraw,
) -> Result<LossTerms<T>> {
    let post = model.conventional()?;
    let like = &p[0];
    let b = batch.rows();
    let rows = draw.eps0.rows();
    if rows % b != 0 || draw.noise.len() + 1 != grid.len() {
        return Err(Error::Dimension {
            what: "path draw",
            expected: grid.len() - 1,
            got: draw.noise.len(),
        });
    }
    model.check_time(*grid.last().expect("non-empty grid"))?;
    let k = rows / b;
    let ctx = post.encoder.encode(p, batch)?;

    let (mu0, s0) = post.initial(p, &ctx.at(&vec![0.0; b])?)?;
    let prior = model.kl_initial(p, &mu0, &s0)?;
    let mut z = tile(&mu0, k)?.add(&tile(&s0, k)?.mul(&like.constant(draw.eps0.clone()))?)?;

    let mut diff = like.constant(Array::zeros(rows, 1));
    let mut rec = like.constant(Array::zeros(rows, 1));
    let mut next_obs = 0;
    for (n, &t) in grid.iter().enumerate() {
        if next_obs < batch.len() && batch.times[next_obs] == t {
            let x = like.constant(tile(&batch.obs[next_obs], k)?);
            rec = rec.add(&model.obs.nll(p, &x, &z)?)?;
            next_obs += 1;
        }
        let Some(&t_next) = grid.get(n + 1) else { break };
        let dt = t_next - t;
        let tc = like.constant(Array::full(rows, 1, t));
        let c = ctx.at(&vec![t_next; rows])?;
        let h = model.prior.drift(p, &z, &tc)?;
        let f = post.drift(p, &z, &tc, &c)?;
        let g = model.prior.diffusion(p, &z, &tc)?;
        let r = h.sub(&f)?.div(&g)?;
        diff = diff.add(&r.square().row_sum().scale(0.5 * dt))?;
        let kick = g.mul(&like.constant(draw.noise[n].scale(dt.sqrt())))?;
        z = z.add(&f.scale(dt))?.add(&kick)?;
        if !z.value().is_finite() {
            return Err(Error::NonFiniteState { step: n + 1, t: t_next });
        }
    }
    if next_obs != batch.len() {
        return Err(Error::Config("grid does not contain every observation time".into()));
    }
    Ok(LossTerms { prior, diff, rec })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PosteriorKind};
    use crate::series::TimeSeries;

    fn model() -> LatentSde {
        let mut cfg = ModelConfig::new(2, 2);
        cfg.width = 16;
        cfg.context_dim = 5;
        cfg.posterior = PosteriorKind::Conventional;
        LatentSde::new(cfg).unwrap()
    }

    fn batch() -> SeriesBatch {
        let s = TimeSeries::new(
            vec![0.0, 0.3, 1.0 / 3.0, 0.9],
            vec![vec![0.1, 0.0], vec![0.4, -0.2], vec![0.5, -0.3], vec![1.0, 0.2]],
        )
        .unwrap();
        SeriesBatch::single(&s).unwrap()
    }

    #[test]
    fn grid_contains_observations_and_uniform_points() {
        let g = union_grid(&[0.0, 0.25, 0.3, 1.0], 4);
        assert_eq!(g, vec![0.0, 0.25, 0.3, 0.5, 0.75, 1.0]);
        let g = union_grid(&[0.1, 1.0 / 3.0 + 1e-15], 3);
        assert_eq!(g.len(), 5);
        assert!(g.contains(&(1.0 / 3.0 + 1e-15)));
    }

    /// Copy the prior drift weights into the posterior drift network with
    /// zero rows for the context inputs.
    fn match_drift_to_prior(m: &mut LatentSde) {
        let prior_layers = m.prior.h_net.layers().to_vec();
        let post_layers = m.conventional().unwrap().drift_net.layers().to_vec();
        for (i, (pl, ql)) in prior_layers.iter().zip(&post_layers).enumerate() {
            let w = m.store.get(pl.weight).clone();
            let mut qw = Array::zeros(ql.fan_in, ql.fan_out);
            for r in 0..w.rows() {
                for c in 0..w.cols() {
                    qw.set(r, c, w.get(r, c));
                }
            }
            let b = m.store.get(pl.bias).clone();
            m.store.set(ql.weight, qw);
            m.store.set(ql.bias, b);
            assert!(i > 0 || ql.fan_in > pl.fan_in);
        }
    }

    #[test]
    fn matching_drifts_give_zero_diffusion_loss() {
        let mut m = model();
        match_drift_to_prior(&mut m);
        let b = batch();
        for (steps, seed) in [(1, 0), (7, 1), (50, 2)] {
            let grid = union_grid(&b.times, steps);
            let draw = PathDraw::sample(&mut rng::seeded(seed), 3, 2, grid.len());
            let terms = elbo_path(&m, m.params(), &b, &grid, &draw).unwrap();
            assert!(terms.diff.data().iter().all(|&v| v == 0.0), "{:?}", terms.diff);
        }
    }

    #[test]
    fn single_interval_reduces_to_three_terms() {
        let m = model();
        let s = TimeSeries::new(vec![0.5], vec![vec![0.3, -0.1]]).unwrap();
        let b = SeriesBatch::single(&s).unwrap();
        let grid = union_grid(&b.times, 1);
        assert_eq!(grid, vec![0.0, 0.5]);
        let draw = PathDraw::sample(&mut rng::seeded(4), 1, 2, grid.len());
        let terms = elbo_path(&m, m.params(), &b, &grid, &draw).unwrap();

        // by hand
        let p = m.params();
        let post = m.conventional().unwrap();
        let ctx = post.encoder.encode(p, &b).unwrap();
        let (mu0, s0) = post.initial(p, &ctx.at(&[0.0]).unwrap()).unwrap();
        let z0 = mu0.add(&s0.mul(&draw.eps0).unwrap()).unwrap();
        let t0 = Array::scalar(0.0);
        let h = m.prior.drift(p, &z0, &t0).unwrap();
        let f = post.drift(p, &z0, &t0, &ctx.at(&[0.5]).unwrap()).unwrap();
        let g = m.prior.diffusion(p, &z0, &t0).unwrap();
        let r = h.sub(&f).unwrap().div(&g).unwrap();
        assert_eq!(terms.diff.item(), 0.5 * r.sum_squares() * 0.5);
        let z1 = z0
            .add(&f.scale(0.5))
            .unwrap()
            .add(&g.mul(&draw.noise[0].scale(0.5f64.sqrt())).unwrap())
            .unwrap();
        let nll = m.obs.nll(p, &b.obs[0], &z1).unwrap();
        assert_eq!(terms.rec.item(), nll.item());
        assert_eq!(terms.prior.item(), m.kl_initial(p, &mu0, &s0).unwrap().item());
    }

    #[test]
    fn path_depends_on_posterior_drift() {
        let mut m = model();
        let b = batch();
        let grid = union_grid(&b.times, 10);
        let draw = PathDraw::sample(&mut rng::seeded(5), 1, 2, grid.len());
        let before = elbo_path(&m, m.params(), &b, &grid, &draw).unwrap().breakdown();
        let id = m.conventional().unwrap().drift_net.layers()[2].bias;
        m.store.set(id, Array::row(&[1.0, -1.0]));
        let after = elbo_path(&m, m.params(), &b, &grid, &draw).unwrap().breakdown();
        assert_ne!(before.l_diff, after.l_diff);
        assert_ne!(before.l_rec, after.l_rec);
        assert_eq!(before.l_prior, after.l_prior);
    }
}
