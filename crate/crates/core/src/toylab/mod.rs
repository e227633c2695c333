//! Desk-scale behavioral-cloning lab: pretrain on many goals, finetune on one, merge,
//! and evaluate in-distribution, under shifted scenes, and on the pretraining tasks.
//!
//! Every result is a pure function of [`LabConfig`]. Training is single-threaded;
//! evaluation rollouts run in parallel with per-episode seeds.

pub mod config;
pub mod env;
pub mod eval;
pub mod model;
pub mod protocol;
pub mod train;

use thiserror::Error;

pub use config::{Baseline, LabConfig};
pub use eval::{evaluate, evaluate_regime, EvalReport, Regime};
pub use model::{gradient_check, policy_group_spec, NetSpec, PolicyNet};
pub use protocol::{run_continual, run_protocol, ContinualReport, ProtocolReport};
pub use train::{bc_train, TrainRun};

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid lab config: {0}")]
    Config(String),
    #[error("policy schema mismatch: {0}")]
    Schema(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("unknown regime: {0}")]
    UnknownRegime(String),
    #[error(transparent)]
    Merge(#[from] crate::merge::MergeError),
    #[error(transparent)]
    Path(#[from] crate::pathlab::PathError),
    #[error(transparent)]
    Store(#[from] crate::tensorstore::StoreError),
}
