//! Deterministic tensors with reverse-mode automatic differentiation.
//!
//! Reductions always run left to right and matrix products go through a
//! single-threaded GEMM, so identical inputs give bit-identical outputs.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{check_graph, finite_difference_check, GradCheckReport, DEFAULT_STEP, DEFAULT_TOL};
pub use graph::{conv_out_len, Graph, Var};
pub use tensor::{Element, Tensor};
