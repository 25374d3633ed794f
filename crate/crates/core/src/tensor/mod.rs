//! Dense tensors, a define-by-run tape and a finite-difference oracle.

mod check;
mod graph;
mod kernels;
mod params;
mod value;

pub use check::{grad_check, param_grad_check, ParamCheckReport};
pub use graph::{sigmoid, Activation, EmptyRows, Gradients, Graph, Var};
pub use kernels::{conv_calls, Padding, PoolKind};
pub use params::{Param, ParamId, ParamStore};
pub use value::Tensor;

pub(crate) use kernels::{conv2d_forward, ConvGeom};
