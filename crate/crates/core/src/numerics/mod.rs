//! Dense `f64` tensors with tape-based reverse-mode differentiation, AdamW,
//! and a central-difference gradient checker.

mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use gradcheck::finite_difference_check;
pub use graph::{log_sum_exp, softmax_slice, Gradients, Graph, Mask, Var};
pub use optim::{clip_global_norm, AdamW, AdamWConfig};
pub use tensor::{matmul, Tensor};
