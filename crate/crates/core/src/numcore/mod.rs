//! Dense tensors, tape autodiff, Adam and learning-rate schedules.

mod adam;
mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod schedule;
mod tensor;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_params, GradCheckReport, DEFAULT_STEP};
pub use graph::{Grads, Graph, Var};
pub use params::{Param, ParamStore};
pub use schedule::{schedule_lr, LrSchedule};
pub use tensor::{Real, Tensor};
