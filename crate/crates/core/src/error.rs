use thiserror::Error;

use crate::numcore::NumError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("integration interval reversed: t1={t1} < t0={t0}")]
    ReversedInterval { t0: f64, t1: f64 },
    #[error("max_step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("non-finite state at integration step {step}")]
    NonFinite { step: usize },
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("mark {mark} out of range for K={k}")]
    MarkOutOfRange { mark: usize, k: usize },
    #[error("query time {t} precedes last history event at {last}")]
    TimeBeforeHistory { t: f64, last: f64 },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
