//! Dense arrays, reverse-mode differentiation and the shared-parameter registry.

mod array;
pub mod gradcheck;
mod graph;
mod linalg;
pub mod ops;
pub mod optim;
mod params;
mod real;

pub use array::{numel, strides, Array};
pub use graph::{Backward, BackwardCtx, Gradients, Graph, NodeId, OpTime, Var};
pub use linalg::gemm;
pub use params::{ParamId, ParamStore, Parameter, SharedHandle};
pub use real::Real;
