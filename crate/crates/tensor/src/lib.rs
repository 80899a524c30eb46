//! Dense 2-D tensors with tape-based reverse-mode automatic differentiation.
//!
//! Values live in [`Matrix`]; differentiable computations are recorded on a
//! [`Graph`] as whole-matrix operations and replayed in reverse by
//! [`Graph::backward`]. [`Adam`] updates parameter matrices from the
//! resulting gradients.
//!
//! ```
//! use dcmcs_tensor::{Graph, Matrix};
//!
//! let mut g = Graph::<f64>::new();
//! let w = g.param(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
//! let sq = g.mul(w, w).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(w).unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);
//! ```

mod adam;
mod error;
pub mod gradcheck;
mod graph;
mod matrix;
mod scalar;

pub use adam::{Adam, AdamConfig};
pub use error::{Result, TensorError};
pub use graph::{Graph, Var, EPS_LOG, EPS_NORM};
pub use matrix::Matrix;
pub use scalar::Scalar;
