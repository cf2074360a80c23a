//! The joint filter: model bundle, per-step objective and gradients, online
//! updates, warm start and prediction.

mod init;
mod model;
mod objective;
mod online;
mod predict;

pub use init::{init_loading_fa, LoadingInit};
pub use model::{Dims, ModelBundle, ParamBlock};
pub use objective::{grad_step_loss, step_loss, FilterState, StepDiagnostics, StepNoise, StepTape, TrainConfig};
pub use online::{filter_online, filter_step, FilterRun, OnlineFilter, SeqRef};
pub(crate) use online::derive_seed;
pub use predict::{one_step_prediction, predict_rollout, Rollout};
