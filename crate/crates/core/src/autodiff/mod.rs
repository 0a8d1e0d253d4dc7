//! Reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! The backward pass is recorded as ordinary primitives in the same
//! [`Graph`], so one engine serves first- and second-order derivatives:
//!
//! ```
//! use mal_core::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(2.0));
//! let x2 = g.mul(x, x).unwrap();
//! let x3 = g.mul(x2, x).unwrap();
//! let dx = g.grad(x3, &[x], true).unwrap()[0];
//! let ddx = g.grad(dx, &[x], false).unwrap()[0];
//! assert_eq!(g.value(dx).item(), 12.0);
//! assert_eq!(g.value(ddx).item(), 12.0);
//! ```

mod check;
mod graph;
mod tensor;

pub use check::{finite_difference, max_relative_error};
pub use graph::{Graph, Node, Primitive};
pub use tensor::{Shape, Tensor};
