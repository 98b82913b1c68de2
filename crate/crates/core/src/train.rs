//! Optimisation loop shared by both methods, per-step metrics and Monte Carlo
//! evaluation of the bound.

use std::io::Write;
use std::time::Instant;

use autodiff::nn::ParamId;
use autodiff::optim::Adam;
use autodiff::{Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::{elbo_path, union_grid, PathDraw};
use crate::error::{Error, Result};
use crate::matching::{estimate_nelbo, matching_terms, Estimate, LossBreakdown, LossTerms, MatchingDraw, CHUNK_ROWS};
use crate::model::{LatentSde, PosteriorKind};
use crate::rng;
use crate::series::{SeriesBatch, TimeSeries};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Matching,
    Baseline,
}

impl Method {
    pub fn posterior(self) -> PosteriorKind {
        match self {
            Method::Matching => PosteriorKind::Matching,
            Method::Baseline => PosteriorKind::Conventional,
        }
    }

    pub fn of(model: &LatentSde) -> Self {
        match model.config.posterior {
            PosteriorKind::Matching => Method::Matching,
            PosteriorKind::Conventional => Method::Baseline,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub lr: f64,
    pub iterations: usize,
    /// Series per step; all series when 0 or larger than the dataset.
    pub batch_size: usize,
    /// Monte Carlo draws per series per step.
    pub samples: usize,
    /// Uniform solver intervals on `[0, t_N]` for the baseline.
    pub baseline_steps: usize,
    /// Consecutive skipped steps before the learning rate is halved.
    pub max_failures: usize,
    /// Halvings tolerated before the run counts as diverged.
    pub max_halvings: usize,
    /// Multiplicative learning-rate decay applied after every step.
    #[serde(default = "no_decay")]
    pub lr_decay: f64,
}

fn no_decay() -> f64 {
    1.0
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            iterations: 5000,
            batch_size: 0,
            samples: 1,
            baseline_steps: 100,
            max_failures: 5,
            max_halvings: 10,
            lr_decay: 0.997,
        }
    }
}

/// Optimiser state and the non-finite-loss bookkeeping.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub adam: Adam,
    pub options: TrainOptions,
    failures: usize,
    halvings: usize,
    step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub wall_ms: f64,
    pub tape_nodes: usize,
    pub steps: usize,
    /// Term that came out non-finite; the update was skipped.
    pub skipped: Option<&'static str>,
}

impl Trainer {
    pub fn new(model: &LatentSde, options: TrainOptions) -> Self {
        Self {
            adam: Adam::new(&model.store, options.lr),
            options,
            failures: 0,
            halvings: 0,
            step: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.adam.lr
    }

    fn record_failure(&mut self) -> Result<()> {
        self.failures += 1;
        if self.failures >= self.options.max_failures {
            self.failures = 0;
            self.halvings += 1;
            self.adam.lr *= 0.5;
            if self.halvings > self.options.max_halvings {
                return Err(Error::Diverged {
                    step: self.step,
                    lr: self.adam.lr,
                });
            }
        }
        Ok(())
    }
}

/// Draws the noise for `method` and evaluates its per-row loss terms.
pub fn objective<T: Tensor, R: Rng + ?Sized>(
    model: &LatentSde,
    p: &[T],
    batch: &SeriesBatch,
    samples: usize,
    baseline_steps: usize,
    rng: &mut R,
) -> Result<(LossTerms<T>, usize)> {
    let d = model.config.latent_dim;
    match Method::of(model) {
        Method::Matching => {
            let draw = MatchingDraw::sample(rng, batch, d, samples);
            Ok((matching_terms(model, p, batch, &draw)?, 0))
        }
        Method::Baseline => {
            let grid = union_grid(&batch.times, baseline_steps);
            let draw = PathDraw::sample(rng, batch.rows() * samples, d, grid.len());
            Ok((elbo_path(model, p, batch, &grid, &draw)?, grid.len() - 1))
        }
    }
}

/// Gradient of the batch-averaged bound on a fresh tape.
pub fn loss_and_gradient<R: Rng + ?Sized>(
    model: &LatentSde,
    batch: &SeriesBatch,
    samples: usize,
    baseline_steps: usize,
    rng: &mut R,
) -> Result<(LossBreakdown, Vec<autodiff::Array>, usize, usize)> {
    let tape = Tape::new();
    let p = model.store.bind(&tape);
    let (terms, steps) = objective(model, &p, batch, samples, baseline_steps, rng)?;
    let total = terms.total()?;
    let loss = terms.breakdown();
    if let Some(term) = loss.non_finite() {
        return Err(Error::NonFiniteLoss { term });
    }
    let nodes = tape.len();
    let grads = tape.backward(&total)?.into_vec();
    Ok((loss, grads, nodes, steps))
}

/// Euclidean norm over trainable parameters.
pub fn trainable_norm(model: &LatentSde, grads: &[autodiff::Array]) -> f64 {
    grads
        .iter()
        .enumerate()
        .filter(|(i, _)| model.store.is_trainable(ParamId(*i)))
        .map(|(_, g)| g.sum_squares())
        .sum::<f64>()
        .sqrt()
}

/// One optimiser update on the batch-averaged bound. A non-finite loss or
/// gradient skips the update and is reported in `skipped`.
pub fn training_step<R: Rng + ?Sized>(
    model: &mut LatentSde,
    batch: &SeriesBatch,
    trainer: &mut Trainer,
    rng: &mut R,
) -> Result<StepReport> {
    let start = Instant::now();
    trainer.step += 1;
    let step = trainer.step;
    let (samples, knob) = (trainer.options.samples, trainer.options.baseline_steps);
    let mut report = StepReport {
        step,
        loss: LossBreakdown::new(f64::NAN, f64::NAN, f64::NAN),
        grad_norm: f64::NAN,
        wall_ms: 0.0,
        tape_nodes: 0,
        steps: 0,
        skipped: None,
    };
    match loss_and_gradient(model, batch, samples, knob, rng) {
        Ok((loss, grads, nodes, steps)) => {
            report.loss = loss;
            report.tape_nodes = nodes;
            report.steps = steps;
            report.grad_norm = trainable_norm(model, &grads);
            if report.grad_norm.is_finite() {
                trainer.failures = 0;
                trainer.adam.step(&mut model.store, &grads);
            } else {
                report.skipped = Some("gradient");
            }
        }
        Err(Error::NonFiniteLoss { term }) => report.skipped = Some(term),
        Err(Error::NonFiniteState { .. }) => report.skipped = Some("path"),
        Err(e) => return Err(e),
    }
    if report.skipped.is_some() {
        trainer.record_failure()?;
    }
    trainer.adam.lr *= trainer.options.lr_decay;
    report.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(report)
}

/// Series indices for the next step.
fn pick_batch<R: Rng + ?Sized>(rng: &mut R, n: usize, batch_size: usize) -> Vec<usize> {
    if batch_size == 0 || batch_size >= n {
        return (0..n).collect();
    }
    let mut idx = rand::seq::index::sample(rng, n, batch_size).into_vec();
    idx.sort_unstable();
    idx
}

/// Runs `options.iterations` steps over `series` (which must share times).
/// `on_step` sees every report, including skipped steps.
pub fn train(
    model: &mut LatentSde,
    series: &[TimeSeries],
    trainer: &mut Trainer,
    rng: &mut ChaCha8Rng,
    mut on_step: impl FnMut(&LatentSde, &StepReport) -> Result<()>,
) -> Result<()> {
    let full = SeriesBatch::new(&series.iter().collect::<Vec<_>>())?;
    for _ in 0..trainer.options.iterations {
        let idx = pick_batch(rng, series.len(), trainer.options.batch_size);
        let batch = if idx.len() == series.len() {
            full.clone()
        } else {
            SeriesBatch::new(&idx.iter().map(|&i| &series[i]).collect::<Vec<_>>())?
        };
        let report = training_step(model, &batch, trainer, rng)?;
        on_step(model, &report)?;
    }
    Ok(())
}

pub const METRICS_HEADER: &str = "step,l_prior,l_diff,l_rec,total,grad_norm_log10,wall_ms,L,tape_nodes";

pub fn write_metrics_row<W: Write>(w: &mut W, r: &StepReport) -> std::io::Result<()> {
    writeln!(
        w,
        "{},{},{},{},{},{},{:.3},{},{}",
        r.step,
        r.loss.l_prior,
        r.loss.l_diff,
        r.loss.l_rec,
        r.loss.total,
        r.grad_norm.log10(),
        r.wall_ms,
        r.steps,
        r.tape_nodes
    )
}

/// Monte Carlo bound for either method, averaged over the batch.
pub fn evaluate_nelbo(
    model: &LatentSde,
    batch: &SeriesBatch,
    samples: usize,
    baseline_steps: usize,
    seed: u64,
) -> Result<Estimate> {
    let mut rng = rng::seeded(seed);
    match Method::of(model) {
        Method::Matching => estimate_nelbo(model, batch, samples, &mut rng),
        Method::Baseline => {
            let b = batch.rows();
            let per_chunk = (CHUNK_ROWS / b).max(1);
            let mut values = Vec::with_capacity(samples);
            while values.len() < samples {
                let k = per_chunk.min(samples - values.len());
                let (terms, _) = objective(model, model.params(), batch, k, baseline_steps, &mut rng)?;
                let prior = terms.prior.mean();
                for s in 0..k {
                    let v: f64 = (0..b).map(|j| terms.diff.get(s * b + j, 0) + terms.rec.get(s * b + j, 0)).sum();
                    values.push(prior + v / b as f64);
                }
            }
            Ok(Estimate::from_samples(&values))
        }
    }
}
