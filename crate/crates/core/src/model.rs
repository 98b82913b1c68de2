//! Latent SDE prior, observation model and the two posterior families.
//!
//! All network code is generic over [`Tensor`], so the same functions run on
//! plain arrays (evaluation, simulation), on tape variables (training) and on
//! dual numbers (time derivatives of the marginal flow).
//!
//! Row convention: a batch of `B` series is queried with `R = k * B` rows and
//! row `r` belongs to series `r % B`.

use autodiff::nn::{lift_dual, GruCell, Linear, Mlp, ParamId, ParamStore};
use autodiff::{time_jvp, Array, Dual, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::series::SeriesBatch;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiffusionKind {
    /// `g_kk` depends on `(z_k, t)`.
    StateDependent,
    /// `g_kk` depends on `t` only.
    StateIndependent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextMode {
    /// Backward recurrence state after all observations, the same for every t.
    Global,
    /// Backward recurrence state at the first observation time `>= t`.
    Piecewise,
    /// Linear interpolation of the backward recurrence states between
    /// neighbouring observation times, held constant outside them.
    Interpolated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderKind {
    Mlp,
    Linear,
    /// `x = z + noise`; needs `obs_dim == latent_dim`.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosteriorKind {
    /// Reparameterised marginals `mu + sigma * eps`.
    Matching,
    /// Neural posterior drift, simulated with Euler-Maruyama.
    Conventional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub g_width: usize,
    pub context_dim: usize,
    pub diffusion: DiffusionKind,
    pub context: ContextMode,
    pub decoder: DecoderKind,
    pub posterior: PosteriorKind,
    /// Fixed observation std; trainable (initialised at 1) when absent.
    pub obs_std: Option<f64>,
    /// Learn `p(z_0)`; otherwise it stays at `N(0, I)`.
    pub learn_initial: bool,
    pub g_min: f64,
    pub sigma_floor: f64,
    /// Upper end of the time domain.
    pub t_max: f64,
    /// Replace the prior networks by a known linear SDE; they are then frozen.
    #[serde(default)]
    pub fixed_prior: Option<LinearPrior>,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(latent_dim: usize, obs_dim: usize) -> Self {
        Self {
            latent_dim,
            obs_dim,
            width: 64,
            depth: 2,
            g_width: 64,
            context_dim: 32,
            diffusion: DiffusionKind::StateDependent,
            context: ContextMode::Interpolated,
            decoder: DecoderKind::Mlp,
            posterior: PosteriorKind::Matching,
            obs_std: None,
            learn_initial: true,
            g_min: 1e-4,
            sigma_floor: 1e-4,
            t_max: 1.0,
            fixed_prior: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("obs_dim", self.obs_dim),
            ("width", self.width),
            ("g_width", self.g_width),
            ("context_dim", self.context_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.decoder == DecoderKind::Identity && self.obs_dim != self.latent_dim {
            return Err(Error::Config("identity decoder needs obs_dim == latent_dim".into()));
        }
        if !(self.g_min > 0.0 && self.sigma_floor > 0.0 && self.t_max > 0.0) {
            return Err(Error::Config("g_min, sigma_floor and t_max must be positive".into()));
        }
        if let Some(s) = self.obs_std {
            if !(s > 0.0) {
                return Err(Error::Config("obs_std must be positive".into()));
            }
        }
        Ok(())
    }

    fn hidden(&self, input: usize, output: usize, width: usize) -> Vec<usize> {
        let mut sizes = vec![input];
        sizes.extend(std::iter::repeat_n(width, self.depth));
        sizes.push(output);
        sizes
    }
}

/// Stacks `k` copies of `x` vertically.
pub fn tile<T: Tensor>(x: &T, k: usize) -> Result<T> {
    if k == 1 {
        return Ok(x.clone());
    }
    Ok(T::concat_rows(&vec![x.clone(); k])?)
}


fn split_cols<T: Tensor>(x: &T, d: usize) -> Result<(T, T)> {
    Ok((x.slice_cols(0, d)?, x.slice_cols(d, d)?))
}

/// `dz = a(t) z dt + sqrt(b(t)^2 + g_min^2) dw` in every coordinate, with
/// `a` and `b` polynomials in `t` given lowest power first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPrior {
    pub drift: Vec<f64>,
    pub dispersion: Vec<f64>,
}

impl LinearPrior {
    /// `a(t) = -t`, `b(t) = t`.
    pub fn time_varying() -> Self {
        Self {
            drift: vec![0.0, -1.0],
            dispersion: vec![0.0, 1.0],
        }
    }

    pub fn eval(coeffs: &[f64], t: f64) -> f64 {
        coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
    }

    fn poly<T: Tensor>(coeffs: &[f64], t: &T) -> Result<T> {
        let mut acc = t.zeros_like();
        for &c in coeffs.iter().rev() {
            acc = acc.mul(t)?.add_scalar(c);
        }
        Ok(acc)
    }
}

/// Prior drift `h(z, t)` and diagonal diffusion `g(z, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorDynamics {
    pub h_net: Mlp,
    /// One network per latent coordinate.
    pub g_nets: Vec<Mlp>,
    pub kind: DiffusionKind,
    pub g_min: f64,
    pub linear: Option<LinearPrior>,
}

impl PriorDynamics {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.latent_dim;
        let h_net = Mlp::new(store, "prior.h", &cfg.hidden(d + 1, d, cfg.width), rng);
        let g_in = match cfg.diffusion {
            DiffusionKind::StateDependent => 2,
            DiffusionKind::StateIndependent => 1,
        };
        let g_nets: Vec<Mlp> = (0..d)
            .map(|k| Mlp::new(store, &format!("prior.g{k}"), &cfg.hidden(g_in, 1, cfg.g_width), rng))
            .collect();
        for net in &g_nets {
            net.zero_last_layer(store);
        }
        if cfg.fixed_prior.is_some() {
            for layer in h_net.layers().iter().chain(g_nets.iter().flat_map(|n| n.layers())) {
                store.set_trainable(layer.weight, false);
                store.set_trainable(layer.bias, false);
            }
        }
        Self {
            h_net,
            g_nets,
            kind: cfg.diffusion,
            g_min: cfg.g_min,
            linear: cfg.fixed_prior.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.g_nets.len()
    }

    /// `h(z, t)` for `z: R x D`, `t: R x 1`.
    pub fn drift<T: Tensor>(&self, p: &[T], z: &T, t: &T) -> Result<T> {
        if let Some(lin) = &self.linear {
            let a = LinearPrior::poly(&lin.drift, t)?;
            return Ok(z.mul(&T::concat_cols(&vec![a; self.dim()])?)?);
        }
        Ok(self.h_net.forward(p, &T::concat_cols(&[z.clone(), t.clone()])?)?)
    }

    fn g_input<T: Tensor>(&self, z: &T, t: &T, k: usize) -> Result<T> {
        Ok(match self.kind {
            DiffusionKind::StateDependent => T::concat_cols(&[z.slice_cols(k, 1)?, t.clone()])?,
            DiffusionKind::StateIndependent => t.clone(),
        })
    }

    /// Diagonal of `g(z, t)` as an `R x D` array.
    pub fn diffusion<T: Tensor>(&self, p: &[T], z: &T, t: &T) -> Result<T> {
        if let Some(lin) = &self.linear {
            let b = LinearPrior::poly(&lin.dispersion, t)?;
            let g = b.square().add_scalar(self.g_min * self.g_min).sqrt();
            return Ok(T::concat_cols(&vec![g; self.dim()])?);
        }
        let cols = self
            .g_nets
            .iter()
            .enumerate()
            .map(|(k, net)| {
                let out = net.forward(p, &self.g_input(z, t, k)?)?;
                Ok(out.softplus().add_scalar(self.g_min))
            })
            .collect::<Result<Vec<T>>>()?;
        Ok(T::concat_cols(&cols)?)
    }

    /// Diagonal of `g` together with `dg_kk / dz_k` (forward mode in `z_k`).
    /// The slope is `None` when `g` does not depend on the state.
    pub fn diffusion_with_slope<T: Tensor>(&self, p: &[T], z: &T, t: &T) -> Result<(T, Option<T>)> {
        if self.kind == DiffusionKind::StateIndependent || self.linear.is_some() {
            return Ok((self.diffusion(p, z, t)?, None));
        }
        let pd = lift_dual(p);
        let td = Dual::constant_of(t.clone());
        let mut gs = Vec::with_capacity(self.dim());
        let mut slopes = Vec::with_capacity(self.dim());
        for (k, net) in self.g_nets.iter().enumerate() {
            let zk = Dual::variable(z.slice_cols(k, 1)?);
            let x = Dual::concat_cols(&[zk, td.clone()])?;
            let (g, slope) = net.forward(&pd, &x)?.softplus().add_scalar(self.g_min).into_parts();
            gs.push(g);
            slopes.push(slope);
        }
        Ok((T::concat_cols(&gs)?, Some(T::concat_cols(&slopes)?)))
    }
}

/// `p(z_0) = N(mean, diag exp(log_std)^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialPrior {
    pub mean: ParamId,
    pub log_std: ParamId,
}

impl InitialPrior {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let d = cfg.latent_dim;
        let mean = store.add("initial.mean", Array::zeros(1, d));
        let log_std = store.add("initial.log_std", Array::zeros(1, d));
        store.set_trainable(mean, cfg.learn_initial);
        store.set_trainable(log_std, cfg.learn_initial);
        Self { mean, log_std }
    }

    pub fn mean<T: Tensor>(&self, p: &[T]) -> T {
        p[self.mean.0].clone()
    }

    pub fn std<T: Tensor>(&self, p: &[T]) -> T {
        p[self.log_std.0].exp()
    }

    /// `mean + std * N(0, I)`, one row per sample.
    pub fn sample<R: Rng + ?Sized>(&self, p: &[Array], n: usize, rng: &mut R) -> Array {
        let eps = rng::normal_array(rng, n, p[self.mean.0].cols());
        eps.mul(&self.std(p)).and_then(|v| v.add(&p[self.mean.0])).expect("row broadcast")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decoder {
    Mlp(Mlp),
    Linear(Linear),
    Identity,
}

/// `p(x | z) = N(decoder(z), diag exp(log_std)^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    pub decoder: Decoder,
    pub log_std: ParamId,
}

impl ObservationModel {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, dx) = (cfg.latent_dim, cfg.obs_dim);
        let decoder = match cfg.decoder {
            DecoderKind::Mlp => Decoder::Mlp(Mlp::new(store, "obs.decoder", &cfg.hidden(d, dx, cfg.width), rng)),
            DecoderKind::Linear => Decoder::Linear(Linear::new(store, "obs.decoder", d, dx, rng)),
            DecoderKind::Identity => Decoder::Identity,
        };
        let init = cfg.obs_std.map_or(0.0, f64::ln);
        let log_std = store.add("obs.log_std", Array::full(1, dx, init));
        store.set_trainable(log_std, cfg.obs_std.is_none());
        Self { decoder, log_std }
    }

    pub fn decode<T: Tensor>(&self, p: &[T], z: &T) -> Result<T> {
        Ok(match &self.decoder {
            Decoder::Mlp(net) => net.forward(p, z)?,
            Decoder::Linear(layer) => layer.forward(p, z)?,
            Decoder::Identity => z.clone(),
        })
    }

    pub fn std<T: Tensor>(&self, p: &[T]) -> T {
        p[self.log_std.0].exp()
    }

    /// `-log p(x | z)` per row, `R x 1`.
    pub fn nll<T: Tensor>(&self, p: &[T], x: &T, z: &T) -> Result<T> {
        let log_std = &p[self.log_std.0];
        let m = self.decode(p, z)?;
        let w = x.sub(&m)?.div(&log_std.exp())?;
        let per = w.square().scale(0.5).add(log_std)?.add_scalar(0.5 * LN_2PI);
        Ok(per.row_sum())
    }
}

/// Backward-in-time gated recurrence over `(t_i, x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub gru: GruCell,
    pub mode: ContextMode,
}

/// Encoder states for a batch; state `i` has seen observations `i..N`.
#[derive(Debug, Clone)]
pub struct Context<T> {
    times: Vec<f64>,
    /// States stacked time-major, `N * B x H`; row `i * B + j` is series `j`.
    stacked: T,
    batch: usize,
    mode: ContextMode,
}

impl Encoder {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            gru: GruCell::new(store, name, cfg.obs_dim + 1, cfg.context_dim, rng),
            mode: cfg.context,
        }
    }

    pub fn encode<T: Tensor>(&self, p: &[T], batch: &SeriesBatch) -> Result<Context<T>> {
        if batch.dim() + 1 != self.gru.input_dim() {
            return Err(Error::Dimension {
                what: "observation dimension",
                expected: self.gru.input_dim() - 1,
                got: batch.dim(),
            });
        }
        if batch.is_empty() {
            return Err(Error::EmptySeries);
        }
        let b = batch.rows();
        let mut states = vec![p[0].constant(Array::zeros(b, self.gru.hidden())); batch.len()];
        let mut h = states[0].clone();
        for i in (0..batch.len()).rev() {
            let t = Array::full(b, 1, batch.times[i]);
            let x = p[0].constant(Array::concat_cols(&[&t, &batch.obs[i]])?);
            h = self.gru.step(p, &x, &h)?;
            states[i] = h.clone();
        }
        Ok(Context {
            times: batch.times.clone(),
            stacked: T::concat_rows(&states)?,
            batch: b,
            mode: self.mode,
        })
    }
}

impl<T: Tensor> Context<T> {
    pub fn batch_rows(&self) -> usize {
        self.batch
    }

    /// `(state, weight, rate)` triples giving the context at `t` as
    /// `sum weight * state` and its time derivative as `sum rate * state`.
    fn stencil(&self, t: f64) -> Vec<(usize, f64, f64)> {
        let n = self.times.len();
        match self.mode {
            ContextMode::Global => vec![(0, 1.0, 0.0)],
            ContextMode::Piecewise => match self.times.iter().position(|&ti| ti >= t) {
                Some(i) => vec![(i, 1.0, 0.0)],
                None => Vec::new(),
            },
            ContextMode::Interpolated => {
                if t <= self.times[0] {
                    return vec![(0, 1.0, 0.0)];
                }
                if t >= self.times[n - 1] {
                    return vec![(n - 1, 1.0, 0.0)];
                }
                let i = self.times.partition_point(|&ti| ti <= t) - 1;
                let span = self.times[i + 1] - self.times[i];
                let w = (t - self.times[i]) / span;
                vec![(i, 1.0 - w, -1.0 / span), (i + 1, w, 1.0 / span)]
            }
        }
    }

    fn check_rows(&self, rows: usize) -> Result<()> {
        if rows % self.batch != 0 {
            return Err(Error::Dimension {
                what: "query rows (multiple of batch)",
                expected: self.batch,
                got: rows,
            });
        }
        Ok(())
    }

    fn weights(&self, t: &[f64]) -> (Array, Array, bool) {
        let b = self.batch;
        let cols = self.times.len() * b;
        let mut w = Array::zeros(t.len(), cols);
        let mut r = Array::zeros(t.len(), cols);
        let mut moving = false;
        for (row, &ti) in t.iter().enumerate() {
            for (i, weight, rate) in self.stencil(ti) {
                w.set(row, i * b + row % b, weight);
                r.set(row, i * b + row % b, rate);
                moving |= rate != 0.0;
            }
        }
        (w, r, moving)
    }

    /// Context rows for query times `t` (one per row).
    pub fn at(&self, t: &[f64]) -> Result<T> {
        self.check_rows(t.len())?;
        let (w, _, _) = self.weights(t);
        Ok(self.stacked.constant(w).matmul(&self.stacked)?)
    }

    /// Context rows with their time derivative.
    pub fn at_dual(&self, t: &[f64]) -> Result<Dual<T>> {
        self.check_rows(t.len())?;
        let (w, r, moving) = self.weights(t);
        let c = self.stacked.constant(w).matmul(&self.stacked)?;
        if !moving {
            return Ok(Dual::constant_of(c));
        }
        let rate = self.stacked.constant(r).matmul(&self.stacked)?;
        Ok(Dual::new(c, rate)?)
    }
}

/// `mu, sigma` of the marginal at one set of rows, with their time
/// derivatives when requested.
#[derive(Debug, Clone)]
pub struct Marginal<T> {
    pub mu: T,
    pub sigma: T,
    pub mu_dot: T,
    pub sigma_dot: T,
}

/// `F(eps, t, X) = mu(X, t) + sigma(X, t) * eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorReparam {
    pub encoder: Encoder,
    pub mu_head: Mlp,
    pub sigma_head: Mlp,
    pub sigma_floor: f64,
}

impl PosteriorReparam {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, c) = (cfg.latent_dim, cfg.context_dim);
        Self {
            encoder: Encoder::new(store, "posterior.encoder", cfg, rng),
            mu_head: Mlp::new(store, "posterior.mu", &cfg.hidden(c + 1, d, cfg.width), rng),
            sigma_head: Mlp::new(store, "posterior.sigma", &cfg.hidden(c + 1, d, cfg.width), rng),
            sigma_floor: cfg.sigma_floor,
        }
    }

    /// `(mu, sigma)` for context rows `c` and times `t: R x 1`.
    pub fn heads<T: Tensor>(&self, p: &[T], c: &T, t: &T) -> autodiff::Result<(T, T)> {
        let x = T::concat_cols(&[c.clone(), t.clone()])?;
        let mu = self.mu_head.forward(p, &x)?;
        let sigma = self.sigma_head.forward(p, &x)?.softplus().add_scalar(self.sigma_floor);
        Ok((mu, sigma))
    }

    /// Heads and their time derivatives in one forward-mode pass.
    pub fn marginal<T: Tensor>(&self, p: &[T], c: &Dual<T>, t: &T) -> Result<Marginal<T>> {
        let pd = lift_dual(p);
        let cd = c;
        let d = self.mu_head.output_dim();
        let out = time_jvp(t, |td| {
            let (mu, sigma) = self.heads(&pd, cd, td)?;
            Dual::concat_cols(&[mu, sigma])
        })?;
        let (primal, tangent) = out.into_parts();
        let (mu, sigma) = split_cols(&primal, d)?;
        let (mu_dot, sigma_dot) = split_cols(&tangent, d)?;
        Ok(Marginal {
            mu,
            sigma,
            mu_dot,
            sigma_dot,
        })
    }
}

/// Posterior of the simulation-based baseline: `q(z_0 | X)` plus a drift
/// network conditioned on the context.
#[derive(Debug, Clone, PartialEq)]
pub struct ConventionalPosterior {
    pub encoder: Encoder,
    /// Input `[z, t, context]`.
    pub drift_net: Mlp,
    /// Context at `t = 0` to `[mu_0, pre-softplus sigma_0]`.
    pub initial_head: Mlp,
    pub sigma_floor: f64,
}

impl ConventionalPosterior {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, c) = (cfg.latent_dim, cfg.context_dim);
        Self {
            encoder: Encoder::new(store, "posterior.encoder", cfg, rng),
            drift_net: Mlp::new(store, "posterior.drift", &cfg.hidden(d + 1 + c, d, cfg.width), rng),
            initial_head: Mlp::new(store, "posterior.initial", &cfg.hidden(c, 2 * d, cfg.width), rng),
            sigma_floor: cfg.sigma_floor,
        }
    }

    pub fn drift<T: Tensor>(&self, p: &[T], z: &T, t: &T, c: &T) -> Result<T> {
        let x = T::concat_cols(&[z.clone(), t.clone(), c.clone()])?;
        Ok(self.drift_net.forward(p, &x)?)
    }

    pub fn initial<T: Tensor>(&self, p: &[T], c0: &T) -> Result<(T, T)> {
        let out = self.initial_head.forward(p, c0)?;
        let (mu, s) = split_cols(&out, self.drift_net.output_dim())?;
        Ok((mu, s.softplus().add_scalar(self.sigma_floor)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Posterior {
    Matching(PosteriorReparam),
    Conventional(ConventionalPosterior),
}

/// Drift of the posterior SDE and its ingredients at `z = mu + sigma * eps`.
#[derive(Debug, Clone)]
pub struct DriftTerms<T> {
    pub z: T,
    pub marginal: Marginal<T>,
    /// Conditional ODE drift `mu_dot + sigma_dot * eps`.
    pub fbar: T,
    /// `-eps / sigma`.
    pub score: T,
    pub g: T,
    /// `dg_kk / dz_k`, absent for state-independent diffusion.
    pub slope: Option<T>,
    pub f: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSde {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub prior: PriorDynamics,
    pub initial: InitialPrior,
    pub obs: ObservationModel,
    pub posterior: Posterior,
}

impl LatentSde {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(config.seed);
        let mut store = ParamStore::new();
        let prior = PriorDynamics::new(&mut store, &config, &mut rng);
        let initial = InitialPrior::new(&mut store, &config);
        let obs = ObservationModel::new(&mut store, &config, &mut rng);
        let posterior = match config.posterior {
            PosteriorKind::Matching => Posterior::Matching(PosteriorReparam::new(&mut store, &config, &mut rng)),
            PosteriorKind::Conventional => {
                Posterior::Conventional(ConventionalPosterior::new(&mut store, &config, &mut rng))
            }
        };
        Ok(Self {
            config,
            store,
            prior,
            initial,
            obs,
            posterior,
        })
    }

    pub fn params(&self) -> &[Array] {
        self.store.values()
    }

    pub fn reparam(&self) -> Result<&PosteriorReparam> {
        match &self.posterior {
            Posterior::Matching(r) => Ok(r),
            Posterior::Conventional(_) => Err(Error::Config("operation needs the matching posterior".into())),
        }
    }

    pub fn conventional(&self) -> Result<&ConventionalPosterior> {
        match &self.posterior {
            Posterior::Conventional(c) => Ok(c),
            Posterior::Matching(_) => Err(Error::Config("operation needs the conventional posterior".into())),
        }
    }

    pub fn encoder(&self) -> &Encoder {
        match &self.posterior {
            Posterior::Matching(r) => &r.encoder,
            Posterior::Conventional(c) => &c.encoder,
        }
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if (0.0..=self.config.t_max).contains(&t) {
            Ok(())
        } else {
            Err(Error::TimeOutOfRange {
                t,
                t_max: self.config.t_max,
            })
        }
    }

    /// Full posterior SDE drift at rows `eps` with context rows `c`.
    pub fn drift_terms<T: Tensor>(&self, p: &[T], c: &Dual<T>, t: &T, eps: &T) -> Result<DriftTerms<T>> {
        let marginal = self.reparam()?.marginal(p, c, t)?;
        let z = marginal.mu.add(&marginal.sigma.mul(eps)?)?;
        let (g, slope) = self.prior.diffusion_with_slope(p, &z, t)?;
        let fbar = marginal.mu_dot.add(&marginal.sigma_dot.mul(eps)?)?;
        let score = eps.div(&marginal.sigma)?.neg();
        let f = sde_drift(&fbar, &score, &g, slope.as_ref())?;
        Ok(DriftTerms {
            z,
            marginal,
            fbar,
            score,
            g,
            slope,
            f,
        })
    }

    /// `r = (h - f) / g` per row.
    pub fn residual<T: Tensor>(&self, p: &[T], c: &Dual<T>, t: &T, eps: &T) -> Result<T> {
        let terms = self.drift_terms(p, c, t, eps)?;
        let h = self.prior.drift(p, &terms.z, t)?;
        Ok(h.sub(&terms.f)?.div(&terms.g)?)
    }

    /// `KL(N(mu_q, sigma_q^2) || p(z_0))` per row.
    pub fn kl_initial<T: Tensor>(&self, p: &[T], mu_q: &T, sigma_q: &T) -> Result<T> {
        let mu_p = self.initial.mean(p);
        let log_sp = &p[self.initial.log_std.0];
        let var_p = log_sp.scale(2.0).exp();
        let num = sigma_q.square().add(&mu_q.sub(&mu_p)?.square())?;
        let per = log_sp
            .sub(&sigma_q.log())?
            .add(&num.div(&var_p.scale(2.0))?)?
            .add_scalar(-0.5);
        Ok(per.row_sum())
    }
}

/// Plain-array entry points for a single time shared by all rows.
impl LatentSde {
    fn rows_at(&self, batch: &SeriesBatch, t: f64, rows: usize) -> Result<(Dual<Array>, Array)> {
        self.check_time(t)?;
        let p = self.params();
        let ctx = self.encoder().encode(p, batch)?;
        Ok((ctx.at_dual(&vec![t; rows])?, Array::full(rows, 1, t)))
    }

    /// `mu` and `sigma` at time `t`, one row per series.
    pub fn posterior_marginal(&self, batch: &SeriesBatch, t: f64) -> Result<Marginal<Array>> {
        let (c, tc) = self.rows_at(batch, t, batch.rows())?;
        self.reparam()?.marginal(self.params(), &c, &tc)
    }

    /// `z_t = mu + sigma * eps`.
    pub fn sample_posterior(&self, batch: &SeriesBatch, t: f64, eps: &Array) -> Result<Array> {
        let (c, tc) = self.rows_at(batch, t, eps.rows())?;
        let (mu, sigma) = self.reparam()?.heads(self.params(), c.primal(), &tc)?;
        Ok(mu.add(&sigma.mul(eps)?)?)
    }

    /// `eps = (z - mu) / sigma`.
    pub fn invert_posterior(&self, batch: &SeriesBatch, t: f64, z: &Array) -> Result<Array> {
        let (c, tc) = self.rows_at(batch, t, z.rows())?;
        let (mu, sigma) = self.reparam()?.heads(self.params(), c.primal(), &tc)?;
        Ok(z.sub(&mu)?.div(&sigma)?)
    }

    /// Velocity of the flow `t -> F(eps, t, X)` at the point `z`.
    pub fn conditional_ode_drift(&self, batch: &SeriesBatch, t: f64, z: &Array) -> Result<Array> {
        let (c, tc) = self.rows_at(batch, t, z.rows())?;
        let m = self.reparam()?.marginal(self.params(), &c, &tc)?;
        let eps = z.sub(&m.mu)?.div(&m.sigma)?;
        let fbar = m.mu_dot.add(&m.sigma_dot.mul(&eps)?)?;
        if !fbar.is_finite() {
            return Err(Error::NonFiniteState { step: 0, t });
        }
        Ok(fbar)
    }

    /// Drift of the posterior SDE at `z = F(eps, t, X)`.
    pub fn posterior_sde_drift(&self, batch: &SeriesBatch, t: f64, eps: &Array) -> Result<DriftTerms<Array>> {
        let (c, tc) = self.rows_at(batch, t, eps.rows())?;
        self.drift_terms(self.params(), &c, &tc, eps)
    }

    pub fn prior_drift(&self, z: &Array, t: f64) -> Result<Array> {
        self.prior.drift(self.params(), z, &Array::full(z.rows(), 1, t))
    }

    pub fn prior_diffusion(&self, z: &Array, t: f64) -> Result<Array> {
        self.prior.diffusion(self.params(), z, &Array::full(z.rows(), 1, t))
    }

    /// `log p(x | z)` per row.
    pub fn obs_loglik(&self, x: &Array, z: &Array) -> Result<Array> {
        Ok(self.obs.nll(self.params(), x, z)?.scale(-1.0))
    }

    pub fn initial_prior_sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array {
        self.initial.sample(self.params(), n, rng)
    }
}

/// `-eps / sigma`, the score of `N(mu, diag sigma^2)` at `mu + sigma * eps`.
pub fn posterior_score(sigma: &Array, eps: &Array) -> Result<Array> {
    Ok(eps.div(sigma)?.scale(-1.0))
}

/// `f = fbar + g^2 score / 2 + g dg/dz` (diagonal `g`, coordinatewise).
pub fn sde_drift<T: Tensor>(fbar: &T, score: &T, g: &T, slope: Option<&T>) -> Result<T> {
    let f = fbar.add(&g.square().mul(score)?.scale(0.5))?;
    Ok(match slope {
        Some(s) => f.add(&g.mul(s)?)?,
        None => f,
    })
}

/// Closed-form `KL(N(mq, sq^2) || N(mp, sp^2))`, summed over coordinates.
pub fn gaussian_kl(mq: &[f64], sq: &[f64], mp: &[f64], sp: &[f64]) -> f64 {
    (0..mq.len())
        .map(|k| (sp[k] / sq[k]).ln() + (sq[k].powi(2) + (mq[k] - mp[k]).powi(2)) / (2.0 * sp[k].powi(2)) - 0.5)
        .sum()
}
