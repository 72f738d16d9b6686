//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The [`Graph`] arena holds every intermediate value of a model's loss.
//! Leaves are created with [`Graph::param`] (receive gradients) or
//! [`Graph::input`] (constants); primitives validate shapes at construction
//! time and compute nothing until [`Graph::eval_forward`] is called on a root.
//! [`Graph::backprop`] then fills the gradient of every parameter leaf.
//!
//! ```
//! use bridge_autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(2.0));
//! let y = g.param(Tensor::scalar(3.0));
//! let z = g.mul(x, y).unwrap();
//! assert_eq!(g.eval_forward(z).unwrap().item(), 6.0);
//! g.backprop(z).unwrap();
//! assert_eq!(g.grad(x).item(), 3.0);
//! ```

mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod tensor;

pub use gradcheck::{relative_error, GradCheck, GradCheckReport};
pub use graph::{CustomOp, Graph, Var, LOG_CLAMP_MAX, LOG_CLAMP_MIN};
pub use optim::{clip_grad_norm, grad_norm, sgd_step, ParamSet, SgdState};
pub use tensor::{numel, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op} at node {node} (inputs {inputs:?}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        inputs: Vec<usize>,
        detail: String,
    },
    #[error("backprop root node {node} is not scalar (shape {shape:?})")]
    NonScalarRoot { node: usize, shape: Vec<usize> },
    #[error("gradient reversal strength must be positive and finite, got {0}")]
    InvalidReversalStrength(f64),
    #[error("node {0} is not a leaf")]
    NotALeaf(usize),
    #[error("unknown node {0}")]
    UnknownNode(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },
    #[error("parameter `{param}`: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        param: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("expected {expected} tensors, got {got}")]
    CountMismatch { expected: usize, got: usize },
}
