//! Dense tensors and reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{
    finite_difference_grad, max_relative_error, max_relative_error_with_floor, relative_error,
    DEFAULT_STEP, RELATIVE_FLOOR,
};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
