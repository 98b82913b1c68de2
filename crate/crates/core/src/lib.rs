//! Latent SDE training without simulating the posterior, plus the pieces
//! needed to check it: a simulation-based baseline, Kalman oracles for
//! linear-Gaussian systems, synthetic data generators and SDE integrators.

pub mod baseline;
pub mod checkpoint;
pub mod compare;
pub mod data;
pub mod error;
pub mod matching;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod series;
pub mod simulate;
pub mod train;

pub use error::{Error, Result};
pub use model::{LatentSde, ModelConfig};
pub use series::{SeriesBatch, TimeSeries};
