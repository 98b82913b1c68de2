//! Cost and gradient-size measurements shared by the CLI `compare` command
//! and the acceptance checks.

use std::time::Instant;

use serde::Serialize;

use crate::data::{gen_linear, linspace};
use crate::error::Result;
use crate::model::{DecoderKind, LatentSde, ModelConfig};
use crate::oracle::LinearSystemSpec;
use crate::rng;
use crate::series::{SeriesBatch, TimeSeries};
use crate::train::{loss_and_gradient, trainable_norm, Method};

/// Solver steps per unit time for the baseline in the horizon experiment.
pub const STEPS_PER_UNIT: f64 = 100.0;
/// Observations per series in the horizon experiment, whatever the horizon.
pub const HORIZON_OBS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub method: Method,
    /// Horizon `T` for gradient rows, solver steps `L` for cost rows.
    pub t_or_l: f64,
    pub mean_log10_gradnorm: f64,
    pub std: f64,
    pub wall_ms: f64,
    pub tape_nodes: usize,
}

pub const TABLE_HEADER: &str = "method,T_or_L,mean_log10_gradnorm,std,wall_ms,tape_nodes";

impl CompareRow {
    pub fn csv(&self) -> String {
        let method = match self.method {
            Method::Matching => "matching",
            Method::Baseline => "baseline",
        };
        format!(
            "{method},{},{},{},{:.3},{}",
            self.t_or_l, self.mean_log10_gradnorm, self.std, self.wall_ms, self.tape_nodes
        )
    }
}

/// The linear-system model used for comparisons: identity decoder with the
/// true observation noise and a standard normal `p(z_0)`.
pub fn linear_config(method: Method, width: usize, t_max: f64, seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::new(1, 1);
    cfg.decoder = DecoderKind::Identity;
    cfg.obs_std = Some(0.1);
    cfg.learn_initial = false;
    cfg.width = width;
    cfg.g_width = width;
    cfg.t_max = t_max;
    cfg.posterior = method.posterior();
    cfg.seed = seed;
    cfg
}

/// One series of the time-varying linear system observed on `[0, horizon]`.
pub fn horizon_series(horizon: f64, seed: u64) -> Result<TimeSeries> {
    let times = linspace(0.0, horizon, HORIZON_OBS);
    let ds = gen_linear(&LinearSystemSpec::time_varying(0.01), &times, 1, seed)?;
    Ok(ds.series[0].clone())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Gradient norms at initialisation for each horizon `T`. Model parameters
/// come from `model_seed` for every `T`; only the objective's noise varies
/// over `noise_seeds` draws. The baseline uses `STEPS_PER_UNIT * T` steps.
pub fn grad_norm_vs_horizon(
    method: Method,
    horizons: &[f64],
    width: usize,
    model_seed: u64,
    noise_seeds: u64,
) -> Result<Vec<CompareRow>> {
    let mut rows = Vec::with_capacity(horizons.len());
    for &horizon in horizons {
        let series = horizon_series(horizon, model_seed)?;
        let batch = SeriesBatch::single(&series)?;
        let model = LatentSde::new(linear_config(method, width, horizon, model_seed))?;
        let steps = ((STEPS_PER_UNIT * horizon).round() as usize).max(1);
        let mut logs = Vec::with_capacity(noise_seeds as usize);
        let mut wall = 0.0;
        let mut nodes = 0;
        for s in 0..noise_seeds {
            let start = Instant::now();
            let (_, grads, n, _) = loss_and_gradient(&model, &batch, 1, steps, &mut rng::seeded(s))?;
            wall += start.elapsed().as_secs_f64() * 1e3;
            nodes = n;
            logs.push(trainable_norm(&model, &grads).log10());
        }
        let (mean, std) = mean_std(&logs);
        rows.push(CompareRow {
            method,
            t_or_l: horizon,
            mean_log10_gradnorm: mean,
            std,
            wall_ms: wall / noise_seeds as f64,
            tape_nodes: nodes,
        });
    }
    Ok(rows)
}

/// Tape size, gradient norm and wall time of one loss-and-gradient
/// evaluation for each step knob `L`, averaged over `reps` evaluations.
/// The knob only changes the baseline's solver grid.
pub fn step_cost(model: &LatentSde, batch: &SeriesBatch, knobs: &[usize], reps: u64) -> Result<Vec<CompareRow>> {
    let method = Method::of(model);
    let mut rows = Vec::with_capacity(knobs.len());
    for &steps in knobs {
        // warm-up outside the timing
        loss_and_gradient(model, batch, 1, steps, &mut rng::seeded(u64::MAX))?;
        let mut logs = Vec::with_capacity(reps as usize);
        let mut nodes = 0;
        let start = Instant::now();
        for s in 0..reps {
            let (_, grads, n, _) = loss_and_gradient(model, batch, 1, steps, &mut rng::seeded(s))?;
            nodes = nodes.max(n);
            logs.push(trainable_norm(model, &grads).log10());
        }
        let wall_ms = start.elapsed().as_secs_f64() * 1e3 / reps as f64;
        let (mean, std) = mean_std(&logs);
        rows.push(CompareRow {
            method,
            t_or_l: steps as f64,
            mean_log10_gradnorm: mean,
            std,
            wall_ms,
            tape_nodes: nodes,
        });
    }
    Ok(rows)
}

/// Coefficient of determination of the least-squares line through `(x, y)`.
pub fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let (mx, _) = mean_std(x);
    let (my, _) = mean_std(y);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}
