//! Reverse-mode automatic differentiation over dense `f64` matrices.

mod gradcheck;
mod kernels;
mod params;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{check_params, grad_check, ParamCheck, PARAM_FLOOR};
pub use kernels::{forward as forward_kernel, Axis, Kernel, DELTA};
pub use params::{Bound, Optimizer, OptimizerKind, Param, ParamId, ParamStore};
pub use rng::{sample_gaussian, Rng, RngState};
pub use tape::{Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;
