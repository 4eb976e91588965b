//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every backward rule is written with the same recorded operations, so a
//! gradient computed with `create_graph = true` can be differentiated again.
//! The critic's gradient penalty relies on this.

mod attend;
mod conv;
mod gemm;
mod grad;
mod ops;
mod tensor;

pub use conv::ConvGeom;
pub use grad::{grad, grad_with_seed};
pub use ops::broadcast_shapes;
pub use tensor::{is_grad_enabled, no_grad, Tensor};

#[cfg(test)]
mod tests;
