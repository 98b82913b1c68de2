use autodiff::Array;

use crate::error::{Error, Result};

/// Observations `x_{t_i}` at strictly increasing times.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub times: Vec<f64>,
    /// One row per observation.
    pub values: Vec<Vec<f64>>,
}

impl TimeSeries {
    pub fn new(times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::EmptySeries);
        }
        if times.len() != values.len() {
            return Err(Error::Dimension {
                what: "observation count",
                expected: times.len(),
                got: values.len(),
            });
        }
        let dim = values[0].len();
        if let Some(bad) = values.iter().find(|v| v.len() != dim) {
            return Err(Error::Dimension {
                what: "observation dimension",
                expected: dim,
                got: bad.len(),
            });
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("observation times must be strictly increasing".into()));
        }
        Ok(Self { times, values })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn last_time(&self) -> f64 {
        *self.times.last().expect("non-empty series")
    }

    /// The first `n` observations.
    pub fn prefix(&self, n: usize) -> Self {
        Self {
            times: self.times[..n].to_vec(),
            values: self.values[..n].to_vec(),
        }
    }

    /// The observations after the first `n`.
    pub fn suffix(&self, n: usize) -> Self {
        Self {
            times: self.times[n..].to_vec(),
            values: self.values[n..].to_vec(),
        }
    }
}

/// Several series sharing observation times, stored time-major with one row
/// per series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesBatch {
    pub times: Vec<f64>,
    pub obs: Vec<Array>,
}

impl SeriesBatch {
    pub fn new(series: &[&TimeSeries]) -> Result<Self> {
        let first = series.first().ok_or(Error::EmptySeries)?;
        if first.is_empty() {
            return Err(Error::EmptySeries);
        }
        if series.iter().any(|s| s.times != first.times) {
            return Err(Error::RaggedBatch);
        }
        let dim = first.dim();
        if let Some(bad) = series.iter().find(|s| s.dim() != dim) {
            return Err(Error::Dimension {
                what: "observation dimension",
                expected: dim,
                got: bad.dim(),
            });
        }
        let obs = (0..first.len())
            .map(|i| Array::from_fn(series.len(), dim, |b, j| series[b].values[i][j]))
            .collect();
        Ok(Self {
            times: first.times.clone(),
            obs,
        })
    }

    pub fn single(series: &TimeSeries) -> Result<Self> {
        Self::new(&[series])
    }

    /// Number of series.
    pub fn rows(&self) -> usize {
        self.obs[0].rows()
    }

    /// Number of observation times.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.obs[0].cols()
    }

    pub fn last_time(&self) -> f64 {
        *self.times.last().expect("non-empty batch")
    }

    /// Observation `i` for each of `rows` query rows; row `r` belongs to
    /// series `r % self.rows()`.
    pub fn gather(&self, idx: &[usize]) -> Array {
        let b = self.rows();
        let d = self.dim();
        Array::from_fn(idx.len(), d, |r, j| self.obs[idx[r]].get(r % b, j))
    }
}
