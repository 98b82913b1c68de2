use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] autodiff::Error),

    #[error("time {t} is outside the model domain [0, {t_max}]")]
    TimeOutOfRange { t: f64, t_max: f64 },

    #[error("time series has no observations")]
    EmptySeries,

    #[error("{what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("series in a batch must share observation times")]
    RaggedBatch,

    #[error("non-finite {term} loss")]
    NonFiniteLoss { term: &'static str },

    #[error("training diverged at step {step}: learning rate fell to {lr:e}")]
    Diverged { step: usize, lr: f64 },

    #[error("non-finite state at step {step} (t = {t})")]
    NonFiniteState { step: usize, t: f64 },

    #[error("state magnitude exceeded {limit} at t = {t}")]
    BlowUp { t: f64, limit: f64 },

    #[error("horizon starts at {start}, before the last observation at {last}")]
    Horizon { start: f64, last: f64 },

    #[error("non-positive innovation variance at t = {t}")]
    Innovation { t: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
