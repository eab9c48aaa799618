//! AdamW with decoupled weight decay, warmup + cosine learning rate, global
//! norm clipping, and an empirical convergence probe.

mod adamw;
mod clip;
mod probe;
mod schedule;

use thiserror::Error;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use clip::{clip_grad_norm, global_norm};
pub use probe::{convergence_probe, fit_loglog_slope, ProbeConfig, ProbeObjective, ProbeReport};
pub use schedule::{lr_at, ScheduleConfig};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("shape mismatch in {0}")]
    ShapeMismatch(&'static str),
    #[error("non-finite gradient")]
    NonFinite,
    #[error("invalid hyperparameter: {0}")]
    Config(String),
    #[error("step {t} outside schedule range 0..={total}")]
    StepOutOfRange { t: usize, total: usize },
    #[error("probe diverged at step {0}")]
    Diverged(usize),
}

pub type Result<T> = std::result::Result<T, OptimError>;
