//! Reverse-mode differentiation over [`Tensor`](crate::tensor::Tensor)s.

mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use gradcheck::{check_gradients, GradCheckOptions, GradReport, ParamReport};
pub use graph::{CustomOp, Graph, Unary, Var};
