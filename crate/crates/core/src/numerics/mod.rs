//! Dense `f64` tensors, differentiable primitives with hand-written
//! backward passes, the Adam optimizer and a finite-difference checker.

mod adam;
mod attention;
mod gradcheck;
pub mod ops;
mod params;
pub mod rng;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use attention::{softmax_attention, softmax_attention_backward, AttentionCache};
pub use gradcheck::{grad_check, relative_error, GradCheckPoint, GradCheckReport, REL_ERR_FLOOR};
pub use params::{Param, ParamSet};
pub use tensor::Tensor;
