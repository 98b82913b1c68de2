use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use autodiff::Array;
use sdematch::compare::{grad_norm_vs_horizon, horizon_series, linear_config, step_cost, TABLE_HEADER};
use sdematch::data::{gen_linear, gen_lorenz, gen_lotka_volterra, linspace, Dataset, LorenzParams, LotkaVolterraParams};
use sdematch::oracle::{kalman_loglik, kalman_smoother_marginals, LinearSystemSpec};
use sdematch::simulate::{forecast, forecast_mse, sample_prior, uniform_grid};
use sdematch::train::{evaluate_nelbo, train, write_metrics_row, Method, Trainer, METRICS_HEADER};
use sdematch::{checkpoint, rng, Error, LatentSde, Result, SeriesBatch};

use crate::config::{RunConfig, System};

pub struct Run {
    pub config: RunConfig,
    pub out_dir: PathBuf,
}

impl Run {
    /// Creates the output directory and writes the resolved config into it.
    pub fn start(config: RunConfig, out_dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&out_dir)?;
        fs::write(out_dir.join("config.txt"), config.to_text())?;
        Ok(Self { config, out_dir })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

fn load_dataset(path: &Path) -> Result<(Dataset, SeriesBatch)> {
    let ds = Dataset::load(path)?;
    let batch = SeriesBatch::new(&ds.series.iter().collect::<Vec<_>>())?;
    Ok((ds, batch))
}

fn check_obs_dim(model: &LatentSde, ds: &Dataset) -> Result<()> {
    if ds.meta.obs_dim != model.config.obs_dim {
        return Err(Error::Dimension {
            what: "observation dim of the dataset (model d_x)",
            expected: model.config.obs_dim,
            got: ds.meta.obs_dim,
        });
    }
    Ok(())
}

pub fn generate_data(run: &Run) -> Result<PathBuf> {
    let c = &run.config;
    let times = linspace(0.0, c.t_end, c.n_obs);
    let ds = match c.system {
        System::Linear => gen_linear(&LinearSystemSpec::time_varying(c.obs_var), &times, c.n_series, c.seed)?,
        System::Lorenz => gen_lorenz(&LorenzParams::default(), &times, c.n_series, c.seed, None)?,
        System::LotkaVolterra => gen_lotka_volterra(&LotkaVolterraParams::default(), &times, c.n_series, c.seed)?,
    };
    let path = run.path("data.csv");
    ds.save(&path)?;
    println!(
        "{}: {} series x {} observations, d_x = {}, D = {} -> {}",
        ds.meta.system,
        ds.series.len(),
        c.n_obs,
        ds.meta.obs_dim,
        ds.meta.latent_dim,
        path.display()
    );
    Ok(path)
}

pub fn train_model(run: &Run, dataset: &Path) -> Result<()> {
    let c = &run.config;
    let (ds, batch) = load_dataset(dataset)?;
    let mut model = LatentSde::new(c.model_config(ds.meta.obs_dim, batch.last_time()))?;
    let mut trainer = Trainer::new(&model, c.train_options());
    let mut metrics = BufWriter::new(fs::File::create(run.path("metrics.csv"))?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    let mut last = f64::NAN;
    let result = train(&mut model, &ds.series, &mut trainer, &mut rng::seeded(c.seed), |_, report| {
        write_metrics_row(&mut metrics, report)?;
        if report.skipped.is_none() {
            last = report.loss.total;
        }
        Ok(())
    });
    metrics.flush()?;
    // skipped steps leave the parameters alone, so this is the last good state
    checkpoint::save(&model, &run.path("model.json"))?;
    result?;
    if c.iterations > 0 && !last.is_finite() {
        return Err(Error::NonFiniteLoss { term: "final" });
    }
    println!("trained {} steps, final loss {last:.4} -> {}", c.iterations, run.path("model.json").display());
    Ok(())
}

pub fn evaluate(run: &Run, model_path: &Path, dataset: &Path) -> Result<()> {
    let c = &run.config;
    let model = checkpoint::load(model_path)?;
    let (ds, batch) = load_dataset(dataset)?;
    check_obs_dim(&model, &ds)?;
    let est = evaluate_nelbo(&model, &batch, c.eval_samples, c.steps, c.seed)?;
    let n_obs = batch.len() as f64;
    let mut rows = vec![
        format!("nelbo,{},{}", est.mean, est.se),
        format!("nelbo_per_obs,{},{}", est.mean / n_obs, est.se / n_obs),
    ];
    println!("NELBO {:.4} ± {:.4} ({} samples)", est.mean, est.se, est.n);
    let context = batch.len().saturating_sub(c.forecast_obs);
    if c.forecast_obs > 0 && context > 0 && batch.last_time() <= model.config.t_max {
        let score = forecast_mse(&model, &ds.series, context, c.paths, c.max_dt, c.seed)?;
        rows.push(format!("forecast_mse,{},", score.model_mse));
        rows.push(format!("last_value_mse,{},", score.last_value_mse));
        println!(
            "forecast MSE {:.5} vs last value {:.5} on the final {} observation(s)",
            score.model_mse, score.last_value_mse, c.forecast_obs
        );
    }
    let mut out = String::from("metric,value,se\n");
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    fs::write(run.path("report.csv"), out)?;
    Ok(())
}

pub fn sample(run: &Run, model_path: &Path) -> Result<()> {
    let c = &run.config;
    let model = checkpoint::load(model_path)?;
    let grid = uniform_grid(0.0, model.config.t_max, c.steps);
    let (traj, obs) = sample_prior(&model, &grid, c.paths, c.seed)?;
    fs::write(run.path("samples.csv"), traj.to_csv(Some(&obs)))?;
    println!("{} prior paths on {} grid points", c.paths, grid.len());
    Ok(())
}

/// Paths follow series `path % B`; `x` columns hold the decoded means.
pub fn forecast_paths(run: &Run, model_path: &Path, dataset: &Path) -> Result<()> {
    let c = &run.config;
    let model = checkpoint::load(model_path)?;
    let (ds, batch) = load_dataset(dataset)?;
    check_obs_dim(&model, &ds)?;
    let t_n = batch.last_time();
    let grid = uniform_grid(t_n, t_n + c.horizon, c.steps);
    let traj = forecast(&model, &batch, &grid, c.paths * batch.rows(), c.seed)?;
    let p = model.params();
    let decoded = traj
        .states
        .iter()
        .map(|z| model.obs.decode(p, z))
        .collect::<Result<Vec<Array>>>()?;
    fs::write(run.path("forecast.csv"), traj.to_csv(Some(&decoded)))?;
    println!("{} paths per series from t = {t_n} to {}", c.paths, t_n + c.horizon);
    Ok(())
}

pub fn compare(run: &Run) -> Result<()> {
    let c = &run.config;
    if c.system != System::Linear {
        return Err(Error::Config("compare runs on the linear system".into()));
    }
    let mut out = format!("{TABLE_HEADER}\n");
    let series = horizon_series(1.0, c.seed)?;
    let batch = SeriesBatch::single(&series)?;
    for method in [Method::Matching, Method::Baseline] {
        let rows = grad_norm_vs_horizon(method, &c.horizons, c.width, c.seed, c.noise_seeds)?;
        let model = LatentSde::new(linear_config(method, c.width, 1.0, c.seed))?;
        let cost = step_cost(&model, &batch, &c.knobs, c.reps)?;
        for r in rows.iter().chain(&cost) {
            out.push_str(&r.csv());
            out.push('\n');
        }
    }
    fs::write(run.path("compare.csv"), &out)?;
    print!("{out}");
    Ok(())
}

/// Exact log-likelihoods and smoother marginals of a linear dataset, next to
/// the model's bound and marginals when a checkpoint is given.
pub fn kalman_check(run: &Run, dataset: &Path, model_path: Option<&Path>) -> Result<()> {
    let c = &run.config;
    let (ds, _) = load_dataset(dataset)?;
    if ds.meta.system != "linear" {
        return Err(Error::Config(format!("kalman-check needs a linear dataset, got {}", ds.meta.system)));
    }
    let r = ds
        .meta
        .params
        .get("obs_cov")
        .and_then(|v| v.get(0))
        .and_then(|v| v.as_f64())
        .ok_or_else(|| Error::Config("dataset metadata lacks obs_cov".into()))?;
    let spec = LinearSystemSpec::time_varying(r);
    let model = model_path.map(checkpoint::load).transpose()?;
    if let Some(m) = &model {
        check_obs_dim(m, &ds)?;
    }

    let mut summary = String::from("series_id,n_obs,loglik");
    let mut smooth = String::from("series_id,t,mean,std");
    if model.is_some() {
        summary.push_str(",nelbo,nelbo_se,gap_per_obs");
        smooth.push_str(",model_mean,model_std");
    }
    summary.push('\n');
    smooth.push('\n');
    for (id, s) in ds.series.iter().enumerate() {
        let ll = kalman_loglik(&spec, s)?;
        summary.push_str(&format!("{id},{},{ll}", s.len()));
        let single = SeriesBatch::single(s)?;
        if let Some(m) = &model {
            let est = evaluate_nelbo(m, &single, c.eval_samples, c.steps, c.seed)?;
            summary.push_str(&format!(",{},{},{}", est.mean, est.se, (est.mean + ll) / s.len() as f64));
        }
        summary.push('\n');
        for (&t, (mean, cov)) in s.times.iter().zip(kalman_smoother_marginals(&spec, s, &s.times)?) {
            smooth.push_str(&format!("{id},{t},{},{}", mean[0], cov[(0, 0)].sqrt()));
            if let Some(m) = &model {
                let mg = m.posterior_marginal(&single, t)?;
                smooth.push_str(&format!(",{},{}", mg.mu.get(0, 0), mg.sigma.get(0, 0)));
            }
            smooth.push('\n');
        }
    }
    fs::write(run.path("kalman.csv"), &summary)?;
    fs::write(run.path("smoother.csv"), &smooth)?;
    print!("{summary}");
    Ok(())
}
