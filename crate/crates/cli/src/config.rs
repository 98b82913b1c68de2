//! Flat `key=value` run configuration.

use std::fmt::Write as _;
use std::str::FromStr;

use sdematch::model::{DecoderKind, DiffusionKind};
use sdematch::train::{Method, TrainOptions};
use sdematch::{Error, ModelConfig, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum System {
    Linear,
    Lorenz,
    LotkaVolterra,
}

impl System {
    fn name(self) -> &'static str {
        match self {
            System::Linear => "linear",
            System::Lorenz => "lorenz",
            System::LotkaVolterra => "lotka-volterra",
        }
    }

    pub fn obs_dim(self) -> usize {
        match self {
            System::Linear => 1,
            System::Lorenz => 3,
            System::LotkaVolterra => 2,
        }
    }
}

impl FromStr for System {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(System::Linear),
            "lorenz" => Ok(System::Lorenz),
            "lotka-volterra" => Ok(System::LotkaVolterra),
            _ => Err(Error::Config(format!("unknown system {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub system: System,
    pub method: Method,
    pub seed: u64,

    // data
    pub n_series: usize,
    pub n_obs: usize,
    pub t_end: f64,
    /// Observation noise variance of the linear system.
    pub obs_var: f64,

    // model
    pub latent_dim: usize,
    pub width: usize,
    pub g_width: usize,
    pub context_dim: usize,
    pub depth: usize,
    pub diffusion: DiffusionKind,
    pub decoder: DecoderKind,
    /// Fixed observation std, or learned when `None`.
    pub obs_std: Option<f64>,
    pub learn_initial: bool,
    /// Model time domain; the dataset's last time when `None`.
    pub t_max: Option<f64>,

    // training
    pub iterations: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub samples: usize,
    /// Baseline solver steps `L`, also the step count for `sample`/`forecast`.
    pub steps: usize,

    // evaluation and sampling
    pub paths: usize,
    pub eval_samples: usize,
    /// Trailing observations per series held out for the forecast score.
    pub forecast_obs: usize,
    /// Forecast length past the last observation.
    pub horizon: f64,
    pub max_dt: f64,

    // compare
    pub horizons: Vec<f64>,
    pub knobs: Vec<usize>,
    pub noise_seeds: u64,
    pub reps: u64,
}

impl RunConfig {
    pub fn defaults(system: System) -> Self {
        let mut c = Self {
            system,
            method: Method::Matching,
            seed: 0,
            n_series: 1,
            n_obs: 20,
            t_end: 1.0,
            obs_var: 0.01,
            latent_dim: system.obs_dim(),
            width: 64,
            g_width: 64,
            context_dim: 32,
            depth: 2,
            diffusion: DiffusionKind::StateDependent,
            decoder: DecoderKind::Identity,
            obs_std: Some(0.1),
            learn_initial: false,
            t_max: None,
            iterations: 5000,
            lr: 1e-2,
            lr_decay: 0.997,
            batch_size: 0,
            samples: 1,
            steps: 100,
            paths: 100,
            eval_samples: 1000,
            forecast_obs: 1,
            horizon: 0.1,
            max_dt: 1e-3,
            horizons: vec![1.0, 2.0, 5.0, 10.0],
            knobs: vec![10, 50, 100, 200],
            noise_seeds: 20,
            reps: 20,
        };
        match system {
            System::Linear => {}
            System::Lorenz => {
                c.n_series = 64;
                c.n_obs = 30;
                c.obs_std = None;
                c.learn_initial = true;
                c.iterations = 3000;
                c.batch_size = 16;
                c.lr_decay = 0.999;
            }
            System::LotkaVolterra => {
                c.n_series = 16;
                c.n_obs = 40;
                c.t_end = 10.0;
                c.width = 32;
                c.g_width = 32;
                c.context_dim = 16;
                c.learn_initial = true;
                c.iterations = 10_000;
                c.lr_decay = 0.9995;
                c.horizon = 1.0;
            }
        }
        c
    }

    /// Defaults for the `system` key (linear when absent), then every pair
    /// in order. Later pairs win.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let system = match pairs.iter().rev().find(|(k, _)| k == "system") {
            Some((_, v)) => v.parse()?,
            None => System::Linear,
        };
        let mut c = Self::defaults(system);
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "system" => self.system = value.parse()?,
            "method" => {
                self.method = match value {
                    "matching" => Method::Matching,
                    "baseline" => Method::Baseline,
                    _ => return Err(bad(key, value)),
                }
            }
            "seed" => self.seed = num(key, value)?,
            "n_series" => self.n_series = num(key, value)?,
            "n_obs" => self.n_obs = num(key, value)?,
            "t_end" => self.t_end = num(key, value)?,
            "obs_var" => self.obs_var = num(key, value)?,
            "latent_dim" => self.latent_dim = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "g_width" => self.g_width = num(key, value)?,
            "context_dim" => self.context_dim = num(key, value)?,
            "depth" => self.depth = num(key, value)?,
            "diffusion" => {
                self.diffusion = match value {
                    "state-dependent" => DiffusionKind::StateDependent,
                    "state-independent" => DiffusionKind::StateIndependent,
                    _ => return Err(bad(key, value)),
                }
            }
            "decoder" => {
                self.decoder = match value {
                    "identity" => DecoderKind::Identity,
                    "linear" => DecoderKind::Linear,
                    "mlp" => DecoderKind::Mlp,
                    _ => return Err(bad(key, value)),
                }
            }
            "obs_std" => self.obs_std = if value == "learned" { None } else { Some(num(key, value)?) },
            "learn_initial" => self.learn_initial = num(key, value)?,
            "t_max" => self.t_max = if value == "data" { None } else { Some(num(key, value)?) },
            "iterations" => self.iterations = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_decay" => self.lr_decay = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "samples" => self.samples = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "paths" => self.paths = num(key, value)?,
            "eval_samples" => self.eval_samples = num(key, value)?,
            "forecast_obs" => self.forecast_obs = num(key, value)?,
            "horizon" => self.horizon = num(key, value)?,
            "max_dt" => self.max_dt = num(key, value)?,
            "horizons" => self.horizons = list(key, value)?,
            "knobs" => self.knobs = list(key, value)?,
            "noise_seeds" => self.noise_seeds = num(key, value)?,
            "reps" => self.reps = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// `iterations`, `batch_size` (0 means all series) and `forecast_obs`
    /// may be zero; every other number must be positive.
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_series", self.n_series),
            ("n_obs", self.n_obs),
            ("latent_dim", self.latent_dim),
            ("width", self.width),
            ("g_width", self.g_width),
            ("context_dim", self.context_dim),
            ("depth", self.depth),
            ("samples", self.samples),
            ("steps", self.steps),
            ("paths", self.paths),
            ("eval_samples", self.eval_samples),
            ("noise_seeds", self.noise_seeds as usize),
            ("reps", self.reps as usize),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        let reals = [
            ("t_end", self.t_end),
            ("obs_var", self.obs_var),
            ("lr", self.lr),
            ("lr_decay", self.lr_decay),
            ("horizon", self.horizon),
            ("max_dt", self.max_dt),
            ("obs_std", self.obs_std.unwrap_or(1.0)),
            ("t_max", self.t_max.unwrap_or(1.0)),
        ];
        if let Some((name, _)) = reals.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.lr_decay > 1.0 {
            return Err(Error::Config("lr_decay must be at most 1".into()));
        }
        if self.horizons.is_empty() || self.horizons.iter().any(|h| !(*h > 0.0)) {
            return Err(Error::Config("horizons must be a non-empty list of positive times".into()));
        }
        if self.knobs.is_empty() || self.knobs.contains(&0) {
            return Err(Error::Config("knobs must be a non-empty list of positive step counts".into()));
        }
        if self.decoder == DecoderKind::Identity && self.latent_dim != self.system.obs_dim() {
            return Err(Error::Config(format!(
                "identity decoder needs latent_dim = {} for the {} system",
                self.system.obs_dim(),
                self.system.name()
            )));
        }
        Ok(())
    }

    pub fn model_config(&self, obs_dim: usize, data_end: f64) -> ModelConfig {
        let mut m = ModelConfig::new(self.latent_dim, obs_dim);
        m.width = self.width;
        m.g_width = self.g_width;
        m.context_dim = self.context_dim;
        m.depth = self.depth;
        m.diffusion = self.diffusion;
        m.decoder = self.decoder;
        m.obs_std = self.obs_std;
        m.learn_initial = self.learn_initial;
        m.t_max = self.t_max.unwrap_or(data_end);
        m.posterior = self.method.posterior();
        m.seed = self.seed;
        m
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            lr: self.lr,
            iterations: self.iterations,
            batch_size: self.batch_size,
            samples: self.samples,
            baseline_steps: self.steps,
            lr_decay: self.lr_decay,
            ..TrainOptions::default()
        }
    }

    /// One `key=value` line per field, readable by [`parse_text`].
    pub fn to_text(&self) -> String {
        let join = |v: Vec<String>| v.join(",");
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        line("system", self.system.name().into());
        line(
            "method",
            match self.method {
                Method::Matching => "matching",
                Method::Baseline => "baseline",
            }
            .into(),
        );
        line("seed", self.seed.to_string());
        line("n_series", self.n_series.to_string());
        line("n_obs", self.n_obs.to_string());
        line("t_end", self.t_end.to_string());
        line("obs_var", self.obs_var.to_string());
        line("latent_dim", self.latent_dim.to_string());
        line("width", self.width.to_string());
        line("g_width", self.g_width.to_string());
        line("context_dim", self.context_dim.to_string());
        line("depth", self.depth.to_string());
        line(
            "diffusion",
            match self.diffusion {
                DiffusionKind::StateDependent => "state-dependent",
                DiffusionKind::StateIndependent => "state-independent",
            }
            .into(),
        );
        line(
            "decoder",
            match self.decoder {
                DecoderKind::Identity => "identity",
                DecoderKind::Linear => "linear",
                DecoderKind::Mlp => "mlp",
            }
            .into(),
        );
        line("obs_std", self.obs_std.map_or("learned".into(), |s| s.to_string()));
        line("learn_initial", self.learn_initial.to_string());
        line("t_max", self.t_max.map_or("data".into(), |t| t.to_string()));
        line("iterations", self.iterations.to_string());
        line("lr", self.lr.to_string());
        line("lr_decay", self.lr_decay.to_string());
        line("batch_size", self.batch_size.to_string());
        line("samples", self.samples.to_string());
        line("steps", self.steps.to_string());
        line("paths", self.paths.to_string());
        line("eval_samples", self.eval_samples.to_string());
        line("forecast_obs", self.forecast_obs.to_string());
        line("horizon", self.horizon.to_string());
        line("max_dt", self.max_dt.to_string());
        line("horizons", join(self.horizons.iter().map(f64::to_string).collect()));
        line("knobs", join(self.knobs.iter().map(usize::to_string).collect()));
        line("noise_seeds", self.noise_seeds.to_string());
        line("reps", self.reps.to_string());
        out
    }
}

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("invalid value {value:?} for {key}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

/// `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        pairs.push(parse_pair(line).map_err(|_| Error::Config(format!("line {}: expected key=value", n + 1)))?);
    }
    Ok(pairs)
}

pub fn parse_pair(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Config(format!("expected key=value, got {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn resolved_text_round_trips() {
        for system in ["linear", "lorenz", "lotka-volterra"] {
            let c = RunConfig::from_pairs(&pairs(&[("system", system), ("method", "baseline"), ("t_max", "2.5")])).unwrap();
            let again = RunConfig::from_pairs(&parse_text(&c.to_text()).unwrap()).unwrap();
            assert_eq!(c, again);
        }
    }

    #[test]
    fn system_sets_defaults_and_later_pairs_win() {
        let c = RunConfig::from_pairs(&pairs(&[("width", "8"), ("system", "lorenz"), ("width", "16")])).unwrap();
        assert_eq!((c.system, c.width, c.n_series, c.latent_dim), (System::Lorenz, 16, 64, 3));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in [
            &[("system", "pendulum")][..],
            &[("width", "0")],
            &[("lr", "-1")],
            &[("latent_dim", "2")],
            &[("colour", "red")],
            &[("horizons", "1,x")],
        ] {
            assert!(matches!(RunConfig::from_pairs(&pairs(bad)), Err(Error::Config(_))), "{bad:?}");
        }
        assert!(RunConfig::from_pairs(&pairs(&[("iterations", "0"), ("decoder", "mlp"), ("latent_dim", "4")])).is_ok());
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let p = parse_text("# run\n\nseed = 3  # trailing\nlr=0.001\n").unwrap();
        assert_eq!(p, pairs(&[("seed", "3"), ("lr", "0.001")]));
        assert!(parse_text("seed 3").is_err());
    }
}
