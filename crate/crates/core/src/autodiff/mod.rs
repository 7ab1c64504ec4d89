//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Leaves are either
//! constants ([`Graph::input`]) or differentiable parameters
//! ([`Graph::param`]). [`Graph::backward`] walks the tape once in reverse
//! index order, which is a reverse topological order because nodes can only
//! reference earlier nodes.
//!
//! The operator set is closed: each op carries a hand-written backward rule,
//! and [`check_gradient`] compares any scalar function against central
//! differences.
//!
//! ```
//! use ctn_core::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{check_gradient, relative_error};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Real, Tensor};

pub(crate) use tensor::matmul_into;
