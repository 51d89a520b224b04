//! Dense `f64` tensors, reverse-mode gradients, and a seeded PRNG.

mod gradcheck;
mod graph;
mod rng;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{layer_norm, mse, softmax, softmax_rows, Axis, Gradients, Graph, Var};
pub use rng::SeededRng;
pub use tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};
