//! Synthetic datasets and their on-disk format.
//!
//! A dataset file is one JSON metadata line, a CSV header
//! `series_id,t,x_1,...,x_d` and one row per observation. Every series draws
//! from its own random stream, so series `i` does not depend on how many
//! others were generated.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::LinearSystemSpec;
use crate::rng;
use crate::series::TimeSeries;

const TAG_SERIES: u64 = 0x5e71e5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub system: String,
    pub seed: u64,
    pub obs_dim: usize,
    pub latent_dim: usize,
    #[serde(default)]
    pub params: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub series: Vec<TimeSeries>,
    /// Latent states at the observation times. Not written to disk.
    pub latent: Vec<Vec<Vec<f64>>>,
}

impl Dataset {
    pub fn to_text(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.meta)?;
        out.push('\n');
        out.push_str("series_id,t");
        for j in 0..self.meta.obs_dim {
            let _ = write!(out, ",x_{}", j + 1);
        }
        out.push('\n');
        for (id, s) in self.series.iter().enumerate() {
            for (t, x) in s.times.iter().zip(&s.values) {
                let _ = write!(out, "{id},{t}");
                for v in x {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let meta_line = lines.next().ok_or(Error::Parse { line: 1, msg: "empty file".into() })?;
        let meta: DatasetMeta = serde_json::from_str(meta_line).map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;
        let header = lines.next().ok_or(Error::Parse { line: 2, msg: "missing header".into() })?;
        let cols = header.split(',').count();
        if cols != meta.obs_dim + 2 {
            return Err(Error::Parse {
                line: 2,
                msg: format!("expected {} columns, found {cols}", meta.obs_dim + 2),
            });
        }
        let mut raw: Vec<(Vec<f64>, Vec<Vec<f64>>)> = Vec::new();
        for (n, line) in lines.enumerate() {
            let line_no = n + 3;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols {
                return Err(Error::Parse { line: line_no, msg: format!("expected {cols} fields") });
            }
            let id: usize = fields[0]
                .trim()
                .parse()
                .map_err(|_| Error::Parse { line: line_no, msg: "bad series id".into() })?;
            let nums = fields[1..]
                .iter()
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
            if id > raw.len() {
                return Err(Error::Parse { line: line_no, msg: "series ids must be contiguous".into() });
            }
            if id == raw.len() {
                raw.push((Vec::new(), Vec::new()));
            }
            raw[id].0.push(nums[0]);
            raw[id].1.push(nums[1..].to_vec());
        }
        let series = raw
            .into_iter()
            .map(|(t, v)| TimeSeries::new(t, v))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { meta, series, latent: Vec::new() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// `n` equally spaced points on `[a, b]`, both ends included.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    }
}

fn series_rng(seed: u64, i: usize) -> ChaCha8Rng {
    rng::stream(rng::derive(seed, TAG_SERIES), i as u64)
}

/// Integrate `step_fn` from `z0` through sorted `times` with sub-steps of at
/// most `dt`, recording the state at each time.
fn integrate<R: Rng + ?Sized>(
    z0: Vec<f64>,
    times: &[f64],
    dt: f64,
    rng: &mut R,
    mut step_fn: impl FnMut(&mut Vec<f64>, f64, f64, &mut R) -> Result<()>,
) -> Result<Vec<Vec<f64>>> {
    let mut z = z0;
    let mut t = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        let span = target - t;
        if span > 0.0 {
            let n = (span / dt).ceil().max(1.0) as usize;
            let h = span / n as f64;
            for i in 0..n {
                step_fn(&mut z, t + i as f64 * h, h, rng)?;
            }
        }
        t = target.max(t);
        out.push(z.clone());
    }
    Ok(out)
}

fn observe<R: Rng + ?Sized>(latent: &[Vec<f64>], noise_std: f64, rng: &mut R) -> Vec<Vec<f64>> {
    latent
        .iter()
        .map(|z| z.iter().map(|v| v + noise_std * rng::normal(rng)).collect())
        .collect()
}

/// Paths of a linear SDE by Euler-Maruyama with step `1e-4`, observed through
/// `H` with noise covariance `R` (diagonal assumed).
pub fn gen_linear(spec: &LinearSystemSpec, times: &[f64], n_series: usize, seed: u64) -> Result<Dataset> {
    let d = spec.dim();
    let mut series = Vec::with_capacity(n_series);
    let mut latent = Vec::with_capacity(n_series);
    let p0_chol = spec
        .p0
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Config("initial covariance is not positive definite".into()))?;
    for i in 0..n_series {
        let mut rng = series_rng(seed, i);
        let e = nalgebra::DVector::from_fn(d, |_, _| rng::normal(&mut rng));
        let z0 = &spec.m0 + p0_chol.l() * e;
        let path = integrate(z0.as_slice().to_vec(), times, 1e-4, &mut rng, |z, t, h, rng| {
            let f = (spec.drift)(t);
            let l = (spec.dispersion)(t);
            let zv = nalgebra::DVector::from_column_slice(z);
            let dw = nalgebra::DVector::from_fn(l.ncols(), |_, _| rng::normal(rng) * h.sqrt());
            let next = &zv + &f * &zv * h + &l * dw;
            z.copy_from_slice(next.as_slice());
            Ok(())
        })?;
        let values = path
            .iter()
            .map(|z| {
                let hz = &spec.obs_map * nalgebra::DVector::from_column_slice(z);
                (0..hz.len())
                    .map(|j| hz[j] + spec.obs_cov[(j, j)].sqrt() * rng::normal(&mut rng))
                    .collect()
            })
            .collect();
        series.push(TimeSeries::new(times.to_vec(), values)?);
        latent.push(path);
    }
    let mut params = serde_json::Map::new();
    params.insert("obs_cov".into(), serde_json::json!(spec.obs_cov.diagonal().as_slice()));
    Ok(Dataset {
        meta: DatasetMeta {
            system: "linear".into(),
            seed,
            obs_dim: spec.obs_dim(),
            latent_dim: d,
            params,
        },
        series,
        latent,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LorenzParams {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub diffusion: f64,
    pub obs_noise_var: f64,
    pub dt: f64,
}

impl Default for LorenzParams {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            diffusion: 0.3,
            obs_noise_var: 0.01,
            dt: 1e-4,
        }
    }
}

impl LorenzParams {
    pub fn drift(&self, z: &[f64]) -> [f64; 3] {
        [
            self.sigma * (z[1] - z[0]),
            z[0] * (self.rho - z[2]) - z[1],
            z[0] * z[1] - self.beta * z[2],
        ]
    }
}

pub const BLOW_UP: f64 = 1e6;

/// Stochastic Lorenz paths by Euler-Maruyama. `z0 = None` draws `z_0 ~ N(0, I)`.
pub fn gen_lorenz(params: &LorenzParams, times: &[f64], n_series: usize, seed: u64, z0: Option<[f64; 3]>) -> Result<Dataset> {
    let mut series = Vec::with_capacity(n_series);
    let mut latent = Vec::with_capacity(n_series);
    for i in 0..n_series {
        let mut rng = series_rng(seed, i);
        let start = match z0 {
            Some(z) => z.to_vec(),
            None => (0..3).map(|_| rng::normal(&mut rng)).collect(),
        };
        let path = integrate(start, times, params.dt, &mut rng, |z, t, h, rng| {
            let f = params.drift(z);
            let sq = h.sqrt();
            for k in 0..3 {
                z[k] += f[k] * h + params.diffusion * sq * rng::normal(rng);
            }
            if z.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP) {
                return Err(Error::BlowUp { t: t + h, limit: BLOW_UP });
            }
            Ok(())
        })?;
        let values = observe(&path, params.obs_noise_var.sqrt(), &mut rng);
        series.push(TimeSeries::new(times.to_vec(), values)?);
        latent.push(path);
    }
    Ok(Dataset {
        meta: DatasetMeta {
            system: "lorenz".into(),
            seed,
            obs_dim: 3,
            latent_dim: 3,
            params: to_map(params)?,
        },
        series,
        latent,
    })
}

/// `dx = (alpha x + beta x y) dt + sigma x dw_1`,
/// `dy = (delta x y + gamma y) dt + sigma y dw_2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LotkaVolterraParams {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub obs_noise_var: f64,
    pub x0: [f64; 2],
    pub dt: f64,
}

impl Default for LotkaVolterraParams {
    fn default() -> Self {
        Self {
            alpha: 2.0 / 3.0,
            beta: -4.0 / 3.0,
            delta: 1.0,
            gamma: -1.0,
            sigma: 0.15,
            obs_noise_var: 0.01,
            x0: [1.0, 1.0],
            dt: 1e-3,
        }
    }
}

impl LotkaVolterraParams {
    /// Drift of `(ln x, ln y)` including the Ito correction.
    fn log_drift(&self, u: f64, v: f64) -> [f64; 2] {
        let c = 0.5 * self.sigma * self.sigma;
        [self.alpha + self.beta * v.exp() - c, self.delta * u.exp() + self.gamma - c]
    }

    /// Conserved by the noise-free system.
    pub fn first_integral(&self, x: f64, y: f64) -> f64 {
        self.delta * x + self.gamma * x.ln() - self.beta * y - self.alpha * y.ln()
    }

    /// One stochastic Heun step in log coordinates. A population at zero
    /// stays there: `ln 0 = -inf` is a fixed point of the update.
    pub fn step(&self, z: &mut [f64], h: f64, dw: [f64; 2]) {
        let (u, v) = (z[0].ln(), z[1].ln());
        let a = self.log_drift(u, v);
        let (us, vs) = (u + a[0] * h + self.sigma * dw[0], v + a[1] * h + self.sigma * dw[1]);
        let b = self.log_drift(us, vs);
        z[0] = (u + 0.5 * (a[0] + b[0]) * h + self.sigma * dw[0]).exp();
        z[1] = (v + 0.5 * (a[1] + b[1]) * h + self.sigma * dw[1]).exp();
    }
}

pub fn gen_lotka_volterra(params: &LotkaVolterraParams, times: &[f64], n_series: usize, seed: u64) -> Result<Dataset> {
    if params.x0.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Config("populations must be non-negative".into()));
    }
    let mut series = Vec::with_capacity(n_series);
    let mut latent = Vec::with_capacity(n_series);
    for i in 0..n_series {
        let mut rng = series_rng(seed, i);
        let path = integrate(params.x0.to_vec(), times, params.dt, &mut rng, |z, _, h, rng| {
            let sq = h.sqrt();
            params.step(z, h, [sq * rng::normal(rng), sq * rng::normal(rng)]);
            Ok(())
        })?;
        let values = observe(&path, params.obs_noise_var.sqrt(), &mut rng);
        series.push(TimeSeries::new(times.to_vec(), values)?);
        latent.push(path);
    }
    Ok(Dataset {
        meta: DatasetMeta {
            system: "lotka-volterra".into(),
            seed,
            obs_dim: 2,
            latent_dim: 2,
            params: to_map(params)?,
        },
        series,
        latent,
    })
}

fn to_map<T: Serialize>(value: &T) -> Result<serde_json::Map<String, serde_json::Value>> {
    match serde_json::to_value(value)? {
        serde_json::Value::Object(m) => Ok(m),
        _ => unreachable!("parameter structs serialise to objects"),
    }
}

/// Per-coordinate mean and standard deviation over every observation.
pub fn standardisation(series: &[TimeSeries]) -> (Vec<f64>, Vec<f64>) {
    let d = series.first().map_or(0, |s| s.dim());
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    let mut n = 0.0;
    for s in series {
        for x in &s.values {
            for j in 0..d {
                sum[j] += x[j];
                sq[j] += x[j] * x[j];
            }
            n += 1.0;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(1e-12).sqrt())
        .collect();
    (mean, std)
}

pub fn apply_standardisation(series: &[TimeSeries], mean: &[f64], std: &[f64]) -> Result<Vec<TimeSeries>> {
    series
        .iter()
        .map(|s| {
            let values = s
                .values
                .iter()
                .map(|x| x.iter().zip(mean.iter().zip(std)).map(|(v, (m, sd))| (v - m) / sd).collect())
                .collect();
            TimeSeries::new(s.times.clone(), values)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linspace_includes_both_ends() {
        assert_eq!(linspace(0.0, 1.0, 3), vec![0.0, 0.5, 1.0]);
        assert_eq!(linspace(2.0, 3.0, 1), vec![2.0]);
    }

    #[test]
    fn text_round_trip() {
        let ds = gen_lorenz(&LorenzParams::default(), &linspace(0.0, 0.2, 5), 3, 7, None).unwrap();
        let text = ds.to_text().unwrap();
        let back = Dataset::from_text(&text).unwrap();
        assert_eq!(back.series, ds.series);
        assert_eq!(back.meta, ds.meta);
        assert!(text.lines().nth(1).unwrap() == "series_id,t,x_1,x_2,x_3");
    }

    #[test]
    fn series_are_independent_of_batch_size() {
        let spec = LinearSystemSpec::time_varying(0.01);
        let times = linspace(0.0, 1.0, 5);
        let a = gen_linear(&spec, &times, 2, 3).unwrap();
        let b = gen_linear(&spec, &times, 5, 3).unwrap();
        assert_eq!(a.series[..], b.series[..2]);
        assert_eq!(a.to_text().unwrap(), gen_linear(&spec, &times, 2, 3).unwrap().to_text().unwrap());
    }

    #[test]
    fn lorenz_blow_up_is_reported() {
        let params = LorenzParams { dt: 0.2, ..Default::default() };
        let err = gen_lorenz(&params, &[0.0, 10.0], 1, 0, Some([1.0, 1.0, 1.0])).unwrap_err();
        assert!(matches!(err, Error::BlowUp { .. }), "{err:?}");
    }

    #[test]
    fn extinct_population_stays_extinct() {
        let params = LotkaVolterraParams { x0: [0.0, 1.0], ..Default::default() };
        let ds = gen_lotka_volterra(&params, &linspace(0.0, 5.0, 6), 2, 1).unwrap();
        for path in &ds.latent {
            assert!(path.iter().all(|z| z[0] == 0.0 && z[1] > 0.0 && z[1].is_finite()));
        }
    }

    #[test]
    fn first_integral_has_zero_time_derivative() {
        let p = LotkaVolterraParams::default();
        for &(x, y) in &[(1.0, 1.0), (0.3, 2.0), (1.7, 0.4)] {
            let (dx, dy) = (p.alpha * x + p.beta * x * y, p.delta * x * y + p.gamma * y);
            let dv = (p.delta + p.gamma / x) * dx + (-p.beta - p.alpha / y) * dy;
            assert!(dv.abs() < 1e-12, "{dv}");
        }
    }

    #[test]
    fn noise_free_orbit_conserves_the_first_integral() {
        let p = LotkaVolterraParams { sigma: 0.0, ..Default::default() };
        let v0 = p.first_integral(1.0, 1.0);
        let mut z = vec![1.0, 1.0];
        let mut drift: f64 = 0.0;
        for _ in 0..7700 {
            p.step(&mut z, 1e-3, [0.0, 0.0]);
            drift = drift.max((p.first_integral(z[0], z[1]) - v0).abs());
        }
        assert!(drift <= 1e-3, "{drift}");
    }

    #[test]
    fn standardised_data_has_unit_moments() {
        let ds = gen_lorenz(&LorenzParams::default(), &linspace(0.0, 1.0, 30), 20, 2, None).unwrap();
        let (m, s) = standardisation(&ds.series);
        let z = apply_standardisation(&ds.series, &m, &s).unwrap();
        let (m2, s2) = standardisation(&z);
        for j in 0..3 {
            assert!(m2[j].abs() < 1e-12 && (s2[j] - 1.0).abs() < 1e-12);
        }
    }
}
