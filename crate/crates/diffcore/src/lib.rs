//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] records operations as they execute; [`Graph::backward`]
//! walks the tape in reverse and produces gradients for every input and
//! parameter leaf. Elementwise binary ops broadcast a right-hand operand
//! whose shape is a suffix of the left-hand shape (bias rows, scalars).

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod real;
mod registry;
mod rng;
mod tensor;

pub use error::{DiffError, Result};
pub use gradcheck::{compare_gradients, grad_check, GradComparison};
pub use graph::{gelu, sigmoid, Gradients, Graph, Var};
pub use real::{DType, Real};
pub use registry::{BoundParams, ParameterRegistry};
pub use rng::RngStream;
pub use tensor::{numel, Tensor};
