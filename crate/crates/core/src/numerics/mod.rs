//! Dense tensors and reverse-mode differentiation.

mod gradcheck;
mod graph;
mod scalar;
mod seed;
mod tensor;

pub use gradcheck::{grad_check, relative_error, ParamCheck, DEFAULT_EPS};
pub use graph::{Graph, Var, LAYER_NORM_EPS, LOG_CLAMP};
pub use scalar::Scalar;
pub use seed::derive_seed;
pub use tensor::Tensor;
