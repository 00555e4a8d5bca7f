//! Reverse-mode automatic differentiation over small dense `f64` arrays.
//!
//! Graphs are built once, evaluated with [`Graph::forward`] against named
//! input bindings, and differentiated with [`Graph::backward`] from a scalar
//! root. The op set is deliberately small: enough for a decoder-only
//! transformer and the preference losses trained on top of it.
//!
//! ```
//! use std::collections::BTreeMap;
//! use autodiff::{Array, Graph};
//!
//! let mut g = Graph::new();
//! let x = g.input("x");
//! let y = g.square(x);
//! let inputs: BTreeMap<_, _> = [("x".to_string(), Array::scalar(3.0))].into();
//! assert_eq!(g.forward(y, &inputs).unwrap().item(), 9.0);
//! assert_eq!(g.backward(y).unwrap()["x"].item(), 6.0);
//! ```
//!
//! A single graph is not `Sync`-shared during evaluation; independent graphs
//! over the same read-only bindings can be evaluated on separate threads.

mod array;
mod error;
pub mod gradcheck;
mod graph;

pub use array::{log_softmax_row, matmul, Array};
pub use error::{AutodiffError, Result};
pub use gradcheck::{check_gradients, relative_error, GradCheckOptions, GradCheckReport, ParamReport};
pub use graph::{
    gelu, gelu_grad, rms_norm_row, sigmoid, softplus, Bindings, ElementwiseFn, Gradients, Graph,
    NodeId, Op,
};
